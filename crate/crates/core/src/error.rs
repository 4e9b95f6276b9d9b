use std::io;

use thiserror::Error;

/// Failures while decoding a PBT1 tensor file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"PBT1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported dtype code 0x{0:02x}")]
    UnsupportedDtype(u8),
    #[error("header truncated: need {needed} bytes, have {available}")]
    TruncatedHeader { needed: usize, available: usize },
    #[error("payload truncated: need {needed} bytes, have {available}")]
    TruncatedPayload { needed: usize, available: usize },
    #[error("{extra} trailing bytes after a payload of {expected} bytes")]
    TrailingBytes { expected: usize, extra: usize },
    #[error("unsupported rank {0} (expected 2 or 4)")]
    UnsupportedRank(u8),
    #[error("dimension product overflows")]
    DimensionOverflow,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("tensor format: {0}")]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
