use thiserror::Error;

pub type Result<T> = std::result::Result<T, FcoError>;

#[derive(Debug, Error)]
pub enum FcoError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("iterates diverged (non-finite state) at round {round}")]
    Diverged { round: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl FcoError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        FcoError::Parameter(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        FcoError::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        FcoError::Domain(msg.into())
    }
}
