use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("resource limit exceeded: {what} (limit {limit}, reached at depth {depth})")]
    ResourceLimit {
        what: String,
        limit: usize,
        depth: usize,
    },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("inconclusive: {0}")]
    Inconclusive(String),
    #[error("missing capability: {0}")]
    Capability(String),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
