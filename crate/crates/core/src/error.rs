use std::io;

use thiserror::Error;

pub type Result<T, E = ApeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ApeError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("bad magic bytes, not an APEKV1 file")]
    BadMagic,

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("arithmetic overflow: {0}")]
    Overflow(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ApeError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        ApeError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ApeError::InvalidArgument(msg.into())
    }

    /// True for the persisted-file decoding failures.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            ApeError::BadMagic
                | ApeError::VersionMismatch { .. }
                | ApeError::Truncated { .. }
                | ApeError::ChecksumMismatch { .. }
                | ApeError::Format(_)
        )
    }
}

impl From<serde_json::Error> for ApeError {
    fn from(e: serde_json::Error) -> Self {
        ApeError::Format(e.to_string())
    }
}
