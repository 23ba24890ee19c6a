use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation has no well-defined result for these inputs.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{kind} file: {source}")]
    Format {
        kind: &'static str,
        source: FormatError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failure modes of the binary containers (dataset and checkpoint files).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatError {
    BadMagic,
    Version { found: u32, expected: u32 },
    Truncated { needed: u64, available: u64 },
    Checksum { stored: u32, computed: u32 },
    Header(String),
    Body(String),
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::BadMagic => write!(f, "bad magic bytes"),
            FormatError::Version { found, expected } => {
                write!(f, "unsupported format version {found} (expected {expected})")
            }
            FormatError::Truncated { needed, available } => {
                write!(f, "truncated: need {needed} bytes, have {available}")
            }
            FormatError::Checksum { stored, computed } => {
                write!(f, "checksum mismatch: stored {stored:08x}, computed {computed:08x}")
            }
            FormatError::Header(msg) => write!(f, "malformed header: {msg}"),
            FormatError::Body(msg) => write!(f, "malformed body: {msg}"),
        }
    }
}

impl std::error::Error for FormatError {}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
