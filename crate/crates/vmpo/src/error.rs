use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("{path}:{line}: {msg}")]
    ConfigParse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
