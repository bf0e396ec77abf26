use std::path::PathBuf;

use dexmode_autodiff::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("no stable grasp found after {attempts} attempts")]
    InitFailure { attempts: usize },
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("missing prerequisite artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

impl From<Error> for AdError {
    fn from(e: Error) -> Self {
        match e {
            Error::Autodiff(a) => a,
            other => AdError::Contract(other.to_string()),
        }
    }
}
