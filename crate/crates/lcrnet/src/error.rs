//! Crate-wide error type.

use std::fmt;

/// Errors produced by the library. The CLI maps these onto exit codes:
/// usage/config-class errors exit 1, runtime/numeric-class errors exit 2.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    Shape(String),
    /// Invalid configuration (divisibility, ranges, unknown keys).
    Config(String),
    /// Argument outside the mathematical domain (e.g. non-positive temperature).
    Domain(String),
    /// Resampling target incompatible with the input resolution.
    Resample(String),
    /// Malformed input text or bytes; `position` is a byte offset for binary
    /// formats and a line number for line-oriented ones.
    Parse { message: String, position: Option<usize> },
    /// API misuse (empty dataset, non-scalar loss, mismatched list lengths).
    Usage(String),
    /// Numeric failure at runtime (NaN gradients, divergence).
    Numeric(String),
    /// Inconsistent data (duplicate ids, checkpoint/config mismatch).
    Validation(String),
    /// Synthetic scene constraints cannot be met.
    Generation(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Resample(m) => write!(f, "resampling error: {m}"),
            Error::Parse { message, position } => match position {
                Some(p) => write!(f, "parse error at {p}: {message}"),
                None => write!(f, "parse error: {message}"),
            },
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Generation(m) => write!(f, "generation error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
