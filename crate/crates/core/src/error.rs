//! Error type shared across the crate.

use thiserror::Error;

/// Unified error for every fallible operation in the crate.
///
/// Variants map one-to-one onto the CLI's exit-code categories, so keep
/// them coarse: the message carries the specifics.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Non-finite values or other numeric trouble.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// File starts with the wrong magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    /// File format version is not supported.
    #[error("unsupported format version: expected {expected}, found {found}")]
    BadVersion { expected: u32, found: u32 },

    /// File ended before the declared payload was complete.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// Malformed text content (config files, caption files, JSON).
    #[error("parse error: {0}")]
    Parse(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Failure during an optimization step.
    #[error("training error: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable process exit code for each error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::BadMagic { .. } | Error::BadVersion { .. } | Error::Truncated(_) | Error::Parse(_) => 4,
            Error::Dimension(_) => 5,
            Error::Numeric(_) => 6,
            Error::Contract(_) => 7,
            Error::Training(_) => 8,
        }
    }
}
