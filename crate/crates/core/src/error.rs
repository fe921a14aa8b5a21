use std::path::PathBuf;

use crate::protocol::TrialType;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no candidate trials for type {0} (configuration error)")]
    EmptyPool(TrialType),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid corpus spec: {0}")]
    InvalidCorpus(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown utterance id `{0}`")]
    MissingUtterance(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing model bundle at {0}")]
    MissingBundle(PathBuf),

    #[error("evaluation requires at least one trial of type {0}")]
    MissingTrialType(TrialType),

    #[error("io error on {path}: {source}")]
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
