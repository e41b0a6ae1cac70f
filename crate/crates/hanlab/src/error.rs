use thiserror::Error;

/// Errors surfaced by the public API. `InvalidArgument` covers contract
/// violations by callers; `StageFailure` is a training stage that aborted or a
/// gate that exhausted its retries; `ContractViolation` marks attempted access
/// to material the threat model forbids.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("stage failure: {0}")]
    StageFailure(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
