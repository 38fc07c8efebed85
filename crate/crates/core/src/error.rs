use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("failed to load pool from {path}: {reason}")]
    Load { path: String, reason: String },
    #[error("cannot sample episode: {0}")]
    Sampling(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training aborted at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
