use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A precondition on shapes, sizes or call order was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An iterative method failed, or a value went non-finite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Minka's fixed point ran out of iterations. Carries the last iterate.
    #[error("dirichlet fit did not converge after {iterations} iterations (last step {last_step:e})")]
    FitDiverged {
        iterations: usize,
        last_step: f64,
        alpha: Vec<f64>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
