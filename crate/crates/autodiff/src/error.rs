use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AdError>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(AdError::Contract(msg.into()))
}
