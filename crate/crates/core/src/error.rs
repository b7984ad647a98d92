use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("`{name}` = {value}: {constraint}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        constraint: String,
    },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("path diverged at step {step} (|x| = {norm:e})")]
    Divergence { step: usize, norm: f64 },

    #[error("horizon {horizon} too small; at least {required} is required")]
    HorizonTooSmall { horizon: f64, required: f64 },

    #[error("contraction constants undefined: {0}")]
    ContractionUndefined(String),

    #[error("chain not stationary: {0}")]
    NonStationary(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}

pub(crate) fn ensure_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value,
            constraint: "must be positive and finite".into(),
        })
    }
}
