use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CimdlError>;

#[derive(Debug, Error)]
pub enum CimdlError {
    /// Operand dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value violates a domain invariant (bad label, negative multiplier, ...).
    #[error("invalid value: {0}")]
    Validation(String),

    /// A binary or text file does not follow its declared layout.
    #[error("{path}: format error at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// The objective became NaN or infinite during training.
    #[error("objective diverged at iteration {iteration} (value {value})")]
    Diverged { iteration: usize, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CimdlError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CimdlError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CimdlError::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CimdlError::Io {
            path: path.into(),
            source,
        }
    }
}
