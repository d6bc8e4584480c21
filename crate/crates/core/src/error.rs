use std::io;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum FedError {
    /// A caller passed arguments that violate an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A run or partition configuration cannot be satisfied.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset file failed structural validation.
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },

    /// A sparse payload references coordinates outside its dimension or is truncated.
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl FedError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FedError::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FedError::Config(msg.into())
    }

    /// Whether the error stems from user configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, FedError::Config(_) | FedError::InvalidInput(_))
    }
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;
