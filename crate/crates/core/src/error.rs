use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NisError>;

#[derive(Debug, Error)]
pub enum NisError {
    /// A caller broke an operation's precondition (shape, range, scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward value or gradient became NaN or infinite.
    #[error("numeric failure at node {node} ({op}): non-finite value")]
    Numeric { node: usize, op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("rejected update: {0}")]
    Rejected(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Format(String),
}

impl NisError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        NisError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        NisError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NisError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            NisError::Contract(_) => "contract",
            NisError::Numeric { .. } => "numeric",
            NisError::Config(_) => "config",
            NisError::Rejected(_) => "rejected",
            NisError::Io { .. } => "io",
            NisError::Format(_) => "format",
        }
    }
}
