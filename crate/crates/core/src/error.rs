//! Error type shared across the crate.
//!
//! Numeric shape misuse panics inside `sicl-tensor` (programming errors);
//! everything a caller can plausibly trigger with data or configuration
//! comes back through [`SiclError`].

use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum SiclError {
    /// A documented precondition was violated (bad assignment index,
    /// all-masked attention row, empty reference, zero entity occurrences).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configured budget (document tokens, bench memory guard) would be
    /// exceeded.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Input below the minimum the subsampling front end can handle.
    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents: bad magic, version, JSON, or truncation.
    #[error("format: {0}")]
    Format(String),
}

impl From<serde_json::Error> for SiclError {
    fn from(e: serde_json::Error) -> Self {
        SiclError::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SiclError>;

pub(crate) fn contract(msg: impl fmt::Display) -> SiclError {
    SiclError::Contract(msg.to_string())
}
