use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence {
        iteration: usize,
        loss: f64,
        /// Last parameter vector whose loss was finite.
        last_finite: Vec<f64>,
    },

    #[error("negative Hessian is singular even with jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("csv error at row {row}: {msg}")]
    Csv { row: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Divergence { .. } | Error::Singular { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
