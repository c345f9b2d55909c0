use thiserror::Error;

/// Errors raised by the GP fitting stack.
#[derive(Debug, Error)]
pub enum GpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GpError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(GpError::InvalidArgument(msg.into()))
}
