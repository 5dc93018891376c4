//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, UvaError>;

#[derive(Debug, Error)]
pub enum UvaError {
    /// A caller violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Dataset-level problem (empty folder, unusable contents).
    #[error("data error: {0}")]
    Data(String),

    /// A loss or gradient went non-finite; `what` names the failing loss
    /// term or parameter path.
    #[error("training diverged: non-finite {what}")]
    Divergence { what: String },

    /// Filesystem failure, annotated with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint bytes do not form a valid container.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// Checkpoint container version is not supported by this build.
    #[error("unsupported checkpoint version: {0}")]
    UnsupportedVersion(String),
}

impl UvaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        UvaError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UvaError::Io {
            path: path.into(),
            source,
        }
    }
}
