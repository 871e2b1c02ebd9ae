//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Model parameters violate a family admissibility constraint.
    #[error("inadmissible model parameters: {0}")]
    InadmissibleParams(String),

    /// Inputs with incompatible dimensions.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Empty or non-finite numeric input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A simulated state stopped being finite.
    #[error("blow-up detected at t = {time:.6} (particle {particle}): {detail}")]
    BlowUp {
        particle: usize,
        time: f64,
        detail: String,
    },

    /// Integrator step size above the stability cap.
    #[error("step size {dt} exceeds stability cap {cap} (epsilon = {epsilon})")]
    StepSizeCap { dt: f64, cap: f64, epsilon: f64 },

    /// Invariant-measure sampler failed its ergodicity diagnostic.
    #[error("ergodicity tolerance not met: gap {gap:.3e} > tol {tol:.3e} within budget {budget}")]
    Ergodicity { gap: f64, tol: f64, budget: usize },

    /// The corrector time integral does not decay within the horizon cap.
    #[error("integrand envelope never below tolerance within horizon cap {cap}: {detail}")]
    TailDivergence { cap: f64, detail: String },

    /// A matrix expected to be positive semi-definite is not.
    #[error("matrix not PSD: eigenvalue {eigenvalue:.6e} below -{tol:.3e} (eigenvector {eigenvector:?})")]
    NotPsd {
        eigenvalue: f64,
        tol: f64,
        eigenvector: Vec<f64>,
    },

    /// Coefficient provider failed during a limit simulation.
    #[error("coefficient provider failure: {0}")]
    Provider(String),

    /// Exact method requested beyond its size cap.
    #[error("method not applicable: {0}")]
    MethodCap(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
