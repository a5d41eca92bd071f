//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Structurally invalid input: negative mass, dimension mismatch,
    /// out-of-range parameter, unparseable file.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A well-formed problem with no admissible solution, e.g. a source
    /// symbol whose every reconstruction has infinite distortion.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Encoded-payload decoding failure, with the byte offset at which it
    /// was detected.
    #[error("decode error at byte {position}: {reason}")]
    Decode { position: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
}
