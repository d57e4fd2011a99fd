use thiserror::Error;

use crate::types::DomainId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sample {sample} has no same-domain negatives")]
    NoNegatives { sample: u64 },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("degenerate batch: branch for domain {domain} received {size} sample(s) in training mode")]
    DegenerateBatch { domain: DomainId, size: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the failure traces back to caller input (bad flags, files, configs)
    /// as opposed to a broken invariant inside the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::InvalidState(_) | Error::Diverged { .. })
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
