use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes that cannot be combined by an operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid experiment or dataset configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// API misuse, e.g. a non-scalar loss passed to backward.
    #[error("usage error: {0}")]
    Usage(String),
    /// NaN or infinite values where finite ones are required.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Malformed checkpoint or dataset file.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
