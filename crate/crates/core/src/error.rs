//! Error types shared by the tensor engine, search loop, and data loaders.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes or channel counts.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value-level precondition was violated (bad label, empty input, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// NaN or Inf reached a checked computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A dataset file did not match the expected binary layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
