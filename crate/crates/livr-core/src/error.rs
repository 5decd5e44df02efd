//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by the laboratory. Variants are grouped by the kind of
/// failure so callers (in particular the CLI) can map them to exit codes.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    ShapeMismatch(String),
    /// A forward op produced NaN or Inf, or training hit a non-finite loss.
    NonFinite(String),
    /// Misuse of the compute graph (backward twice, non-scalar loss, ...).
    Graph(String),
    /// Vocabulary construction or encoding failure (duplicate/unknown symbol).
    Vocab(String),
    /// Invalid configuration (violated invariants, bad combinations).
    Config(String),
    /// Mask construction rejected the input (e.g. a fully blocked row).
    Mask(String),
    /// Task generation could not satisfy its constraints within budget.
    TaskGen(String),
    /// Dataset or checkpoint files are malformed or inconsistent.
    Data(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Graph(m) => write!(f, "graph error: {m}"),
            Error::Vocab(m) => write!(f, "vocabulary error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Mask(m) => write!(f, "mask error: {m}"),
            Error::TaskGen(m) => write!(f, "task generation error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
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

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(format!("json: {e}"))
    }
}
