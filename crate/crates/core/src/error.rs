//! Error type shared across the pipeline.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("load error at {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("stage '{stage}' failed in fold {fold}: {source}")]
    Stage {
        stage: String,
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("leakage guard violated in stage '{stage}' of fold {fold}: {count} test sample(s) reached a training input, first offender '{first}'")]
    LeakageGuard {
        stage: String,
        fold: usize,
        count: usize,
        first: String,
    },

    #[error("checkpoint version mismatch at {path}: found {found}, supported {supported}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("checkpoint format error at {path}: {msg}")]
    Container { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn in_stage(self, stage: &str, fold: usize) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            fold,
            source: Box::new(self),
        }
    }
}
