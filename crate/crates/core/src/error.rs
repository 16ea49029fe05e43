use std::io;

use thiserror::Error;

/// Errors raised anywhere in the codec stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("symbol {symbol} outside table range [{min}, {max}]")]
    SymbolOutOfRange { symbol: i64, min: i64, max: i64 },

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("length overrun: need {needed} bytes, {available} available")]
    Overrun { needed: usize, available: usize },

    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: u32, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("duplicate entry: {0}")]
    Duplicate(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
