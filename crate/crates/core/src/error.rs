use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),

    #[error("corrupt name sequence: {0}")]
    CorruptSequence(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("missing embedding bundles for ids: {0:?}")]
    MissingBundles(Vec<String>),

    #[error("missing predictions for ids: {0:?}")]
    MissingPredictions(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("similarity plugin `{plugin}` failed: {msg}")]
    Plugin { plugin: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad input data rather than configuration
    /// or internal failures.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::EmptyCorpus(_)
                | Error::CorruptSequence(_)
                | Error::Malformed(_)
                | Error::Parse { .. }
                | Error::MissingBundles(_)
                | Error::MissingPredictions(_)
                | Error::Json(_)
        )
    }
}
