//! File formats: binary PGM/PPM images and the key-value text dialect shared
//! by calibration, scene and pipeline configuration files.

pub mod kv;
pub mod pnm;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("truncated data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing key `{key}` in section [{section}]")]
    MissingKey { section: String, key: String },
    #[error("invalid value for `{key}`: {message}")]
    Value { key: String, message: String },
}
