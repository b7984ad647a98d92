//! Numerics for Stein's method with Langevin diffusion targets.

pub mod bismut;
pub mod error;
pub mod experiments;
pub mod functions;
pub mod model;
pub mod ot;
pub mod pair;
pub mod paths;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod stein;

pub use error::{Error, Result};
