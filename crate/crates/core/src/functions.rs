//! Test functions `h` with gradients.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type Eval = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type Grad = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct TestFunction {
    name: String,
    dim: usize,
    eval: Eval,
    grad: Grad,
    lip_bound: Option<f64>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("lip_bound", &self.lip_bound)
            .finish()
    }
}

impl TestFunction {
    /// `lip_bound` is `sup |grad h|`, or `None` for functions that are not
    /// globally Lipschitz (polynomial test functions).
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        lip_bound: Option<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("test function dimension must be positive".into()));
        }
        if let Some(l) = lip_bound {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidInput(format!("Lipschitz bound must be finite and >= 0, got {l}")));
            }
        }
        Ok(Self { name: name.into(), dim, eval: Arc::new(eval), grad: Arc::new(grad), lip_bound })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lip_bound(&self) -> Option<f64> {
        self.lip_bound
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    #[inline]
    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        (self.grad)(x, out)
    }

    pub fn grad_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.grad(x, &mut g);
        g
    }

    /// `<grad h(x), u>`.
    pub fn directional(&self, x: &[f64], u: &[f64], scratch: &mut [f64]) -> f64 {
        self.grad(x, scratch);
        scratch.iter().zip(u).map(|(a, b)| a * b).sum()
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::new(format!("{c}"), dim, move |_| c, |_, g| g.iter_mut().for_each(|v| *v = 0.0), Some(0.0))
            .expect("valid constant")
    }

    pub fn linear(a: Vec<f64>) -> Result<Self> {
        let lip = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let a2 = a.clone();
        Self::new(
            format!("linear{a:?}"),
            a.len(),
            move |x| x.iter().zip(&a).map(|(p, q)| p * q).sum(),
            move |_, g| g.copy_from_slice(&a2),
            Some(lip),
        )
    }

    pub fn coordinate(dim: usize, i: usize) -> Result<Self> {
        check_index(dim, i)?;
        Self::new(
            format!("x{i}"),
            dim,
            move |x| x[i],
            move |_, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[i] = 1.0;
            },
            Some(1.0),
        )
    }

    pub fn coordinate_square(dim: usize, i: usize) -> Result<Self> {
        check_index(dim, i)?;
        Self::new(
            format!("x{i}^2"),
            dim,
            move |x| x[i] * x[i],
            move |x, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[i] = 2.0 * x[i];
            },
            None,
        )
    }

    pub fn square_norm(dim: usize) -> Self {
        Self::new(
            "|x|^2",
            dim,
            |x| x.iter().map(|v| v * v).sum(),
            |x, g| g.iter_mut().zip(x).for_each(|(o, v)| *o = 2.0 * v),
            None,
        )
        .expect("valid dimension")
    }

    /// Euclidean norm; the gradient at 0 is taken to be 0.
    pub fn abs(dim: usize) -> Self {
        Self::new(
            "|x|",
            dim,
            |x| x.iter().map(|v| v * v).sum::<f64>().sqrt(),
            |x, g| {
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    g.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    g.iter_mut().zip(x).for_each(|(o, v)| *o = v / n);
                }
            },
            Some(1.0),
        )
        .expect("valid dimension")
    }

    pub fn sin_coordinate(dim: usize, i: usize) -> Result<Self> {
        check_index(dim, i)?;
        Self::new(
            format!("sin(x{i})"),
            dim,
            move |x| x[i].sin(),
            move |x, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[i] = x[i].cos();
            },
            Some(1.0),
        )
    }
}

fn check_index(dim: usize, i: usize) -> Result<()> {
    if i < dim {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("coordinate index {i} out of range for dimension {dim}")))
    }
}

/// Serializable choice of built-in test function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunctionSpec {
    Constant { c: f64 },
    Linear { a: Vec<f64> },
    Coordinate { i: usize },
    CoordinateSquare { i: usize },
    SquareNorm,
    Abs,
    Sin { i: usize },
}

impl TestFunctionSpec {
    pub fn build(&self, dim: usize) -> Result<TestFunction> {
        match self {
            TestFunctionSpec::Constant { c } => Ok(TestFunction::constant(dim, *c)),
            TestFunctionSpec::Linear { a } => {
                if a.len() != dim {
                    return Err(Error::DimensionMismatch { what: "linear test function", expected: dim, got: a.len() });
                }
                TestFunction::linear(a.clone())
            }
            TestFunctionSpec::Coordinate { i } => TestFunction::coordinate(dim, *i),
            TestFunctionSpec::CoordinateSquare { i } => TestFunction::coordinate_square(dim, *i),
            TestFunctionSpec::SquareNorm => Ok(TestFunction::square_norm(dim)),
            TestFunctionSpec::Abs => Ok(TestFunction::abs(dim)),
            TestFunctionSpec::Sin { i } => TestFunction::sin_coordinate(dim, *i),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_differences() {
        let fns = [
            TestFunction::sin_coordinate(2, 1).unwrap(),
            TestFunction::square_norm(2),
            TestFunction::abs(2),
            TestFunction::linear(vec![0.3, -2.0]).unwrap(),
        ];
        let x = [0.7, -0.4];
        for h in &fns {
            let g = h.grad_vec(&x);
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += 1e-6;
                xm[i] -= 1e-6;
                let fd = (h.eval(&xp) - h.eval(&xm)) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-7, "{} {i}", h.name());
            }
        }
    }
}
