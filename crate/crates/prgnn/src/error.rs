use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants map onto process exit codes in the CLI:
/// config/argument/validation problems exit 2, i/o problems exit 3 and
/// numeric failures (NaN/Inf aborts) exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error at {path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, detail: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    /// Process exit code the CLI uses for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
