use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {message}{}", .last_checkpoint.as_ref().map(|p| format!(" (last checkpoint: {})", p.display())).unwrap_or_default())]
    Numeric {
        message: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("input too short: length {len}, minimum admissible length is {min}")]
    InputLength { len: usize, min: usize },

    #[error("out-of-vocabulary tokens: {}", .0.join(", "))]
    Vocabulary(Vec<String>),

    #[error("length error: {0}")]
    Length(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training failed: {message} (final WER {final_wer:.2})")]
    TrainingFailure { message: String, final_wer: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric {
            message: message.into(),
            last_checkpoint: None,
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
