//! Crate-wide error type.

use crate::train::NonFiniteReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation contract (shape mismatch, bad range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A mask with zero foreground pixels where at least one is required.
    #[error("empty foreground mask")]
    EmptyForeground,

    /// Ingestion failure; always names the offending path.
    #[error("data error ({path}): {reason}")]
    Data { path: String, reason: String },

    /// Malformed checkpoint file; `offset` is the byte where decoding failed.
    #[error("checkpoint format error at byte {offset}: {reason}")]
    Checkpoint { offset: u64, reason: String },

    /// Training produced a non-finite loss; carries the diagnostic state.
    #[error("non-finite loss at epoch {} step {}", .0.epoch, .0.step)]
    NonFiniteLoss(Box<NonFiniteReport>),

    #[error("config error ({key}): {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn data(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
