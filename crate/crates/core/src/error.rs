use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CsdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CsdError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {msg} (at byte {offset})")]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CsdError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        CsdError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CsdError::Io {
            path: path.into(),
            source,
        }
    }
}
