//! Error type shared across the crate.
//!
//! Variants are grouped so the CLI can map them onto process exit codes:
//! configuration problems exit 1, data problems exit 2, numerical failures
//! exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("impute error: {0}")]
    Impute(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Contract(_) | Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
