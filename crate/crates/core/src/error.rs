use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tensor contains non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("malformed tensor file at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("invalid config `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("numeric failure in stage `{stage}`")]
    Numeric { stage: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn numeric(stage: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Numeric { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            Error::Shape(_) | Error::NonFinite { .. } | Error::Domain(_) => 2,
        }
    }
}
