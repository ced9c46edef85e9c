use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("training error at step {step}: {message}")]
    Training { step: u64, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable code, used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Validation(_) => "E_VALIDATION",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::Index(_) => "E_INDEX",
            Error::Config(_) => "E_CONFIG",
            Error::Precondition(_) => "E_PRECONDITION",
            Error::Protocol(_) => "E_PROTOCOL",
            Error::Training { .. } => "E_TRAINING",
            Error::Format(_) => "E_FORMAT",
            Error::Io { .. } => "E_IO",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
