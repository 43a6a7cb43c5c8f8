use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed box: {0}")]
    MalformedBox(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid scene {id}: {reason}")]
    InvalidScene { id: String, reason: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("self-check failed: {0}")]
    SelfCheck(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in structured error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedBox(_) => "malformed_box",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Degenerate(_) => "degenerate_input",
            Error::InvalidScene { .. } => "invalid_scene",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::SelfCheck(_) => "self_check",
        }
    }
}
