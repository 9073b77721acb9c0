use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the file formats and commands. Every variant maps to
/// one machine-readable class and a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Integrity(String),
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(msg: impl std::fmt::Display) -> Self {
        Error::Schema(msg.to_string())
    }

    pub fn config(msg: impl std::fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn class(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Integrity(_) => "integrity",
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
        }
    }

    /// 1 for configuration and schema problems, 2 for I/O and integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) => 1,
            Error::Io { .. } | Error::Integrity(_) => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
