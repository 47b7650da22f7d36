use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the audit toolkit.
///
/// The variants line up with the process exit codes used by the CLI:
/// configuration problems, transport problems and data problems are kept
/// apart so callers can react to each differently.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error ({endpoint}): {message}")]
    Transport { endpoint: String, message: String },

    #[error("endpoint capability error: {0}")]
    Capability(String),

    #[error("{path}:{line}: {message}")]
    DataLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("threshold undefined for {0}: no correctly answered item carries a score")]
    ThresholdUndefined(String),

    #[error("unsupported record format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Broad category of an [`Error`], used for exit codes and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Transport,
    Data,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Transport { .. } | Error::Capability(_) => ErrorKind::Transport,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
