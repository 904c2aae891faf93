use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0}")]
    ShiftState(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("missing forward state: {0}")]
    MissingState(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = NiffError> = std::result::Result<T, E>;

impl NiffError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        NiffError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NiffError::InvalidArgument(msg.into())
    }
}
