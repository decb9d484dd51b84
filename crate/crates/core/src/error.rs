use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse failure: {0}")]
    Parse(#[from] ParseFailure),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// The model produced text that no parser rule could interpret.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{reason} in {text:?}")]
pub struct ParseFailure {
    pub reason: String,
    pub text: String,
}

impl ParseFailure {
    pub fn new(reason: impl Into<String>, text: &str) -> Self {
        Self {
            reason: reason.into(),
            text: text.to_string(),
        }
    }
}
