use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by {stage}")]
    NonFinite { stage: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad numbers or files rather than bad usage.
    pub fn is_runtime(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Io { .. }
                | Error::Parse { .. }
                | Error::Diverged { .. }
                | Error::Oracle(_)
        )
    }
}
