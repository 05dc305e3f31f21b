use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or precondition mismatch at an operation boundary.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid hyperparameter or configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called out of order (e.g. backward before forward).
    #[error("usage error: {0}")]
    Usage(String),

    /// Checkpoint/model architectures disagree.
    #[error("architecture mismatch: {0}")]
    Architecture(String),

    /// NaN or Inf appeared where finite values are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("filter design error: {0}")]
    Design(String),

    /// Malformed binary container. `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Architecture(_) | Error::Usage(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}
