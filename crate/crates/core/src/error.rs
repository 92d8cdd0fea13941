use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the graph, model and visualization layers.
#[derive(Error, Debug)]
pub enum Error {
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (arguments, config, files)
    /// rather than by a failure during computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Argument(_) | Error::Config(_) | Error::Format { .. } | Error::Consistency(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
