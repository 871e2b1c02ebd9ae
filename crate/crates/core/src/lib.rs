//! Numerical toolkit for slow-fast McKean-Vlasov systems: particle
//! simulation of the coupled dynamics, Poisson-corrector estimation of the
//! limiting coefficients, and experiment harnesses that check convergence,
//! fluctuation, and moment behaviour against the predicted scalings.

pub mod engine;
pub mod error;
pub mod harness;
pub mod homogenize;
pub mod linalg;
pub mod measure;
pub mod model;
pub mod noise;
pub mod poisson;
pub mod stats;

pub use error::{Error, Result};
