use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("invalid trace {prompt_id}: {reason}")]
    Trace { prompt_id: String, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("method/config mismatch: {0}")]
    Mismatch(String),

    #[error("infinite KL at position {position}: student assigns zero mass to token {token} supported by teacher")]
    InfiniteKl { position: usize, token: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
