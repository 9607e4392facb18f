//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor or matrix dimensions are inconsistent with the operation.
    Shape(String),
    /// A query row of an attention mask has no allowed key.
    AllMaskedRow(usize),
    /// A loss or gradient left the finite range.
    NonFinite(String),
    /// Invalid argument or configuration value.
    Invalid(String),
    /// A required artifact (checkpoint, manifest, bank) is missing.
    MissingArtifact(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::AllMaskedRow(row) => write!(f, "attention mask row {row} has no allowed key"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::MissingArtifact(msg) => write!(f, "missing artifact: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
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
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
