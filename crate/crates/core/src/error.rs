use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: &'static str, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid model state: {0}")]
    State(String),

    #[error("dataset record `{record}`: {message}")]
    Ingest { record: String, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("non-finite loss at step {step} ({phase})")]
    NonFinite { step: u64, phase: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            field,
            message: message.into(),
        }
    }

    pub(crate) fn input(message: impl Into<String>) -> Self {
        Error::Input(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
