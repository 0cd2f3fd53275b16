//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: usage errors are handled by clap (2);
    /// everything that reaches here is a data/config/runtime failure (3).
    pub fn exit_code(&self) -> i32 {
        3
    }
}

pub type Result<T> = std::result::Result<T, Error>;
