use std::path::PathBuf;

use thiserror::Error;

use crate::report::StreamReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// The operation is not allowed in the current lifecycle state.
    #[error("state error: {0}")]
    State(String),

    #[error("non-finite gradient during attack step {step} (first bad coordinate {index}: {value})")]
    NonFiniteGradient { step: usize, index: usize, value: f64 },

    #[error("dataset error in {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("stream aborted after {} completed session(s): {source}", partial.sessions.len())]
    StreamAborted { partial: Box<StreamReport>, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
