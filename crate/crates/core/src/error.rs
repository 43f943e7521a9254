use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met (bad k, index out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Client replicas of the global model drifted apart.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Data {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at round {round}: {reason}")]
    Diverged { round: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
