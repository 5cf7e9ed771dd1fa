use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {0}")]
    NonFinite(f64),

    #[error("degenerate readout vector (norm {norm:e})")]
    DegenerateReadout { norm: f64 },

    #[error("cyclic order must be at least 1, got {0}")]
    InvalidCyclicOrder(usize),

    #[error("invalid symmetry spec: {0}")]
    InvalidSpec(String),

    #[error("unknown interpolation mode `{0}` (expected nearest or bilinear)")]
    UnknownInterpolation(String),

    #[error("unknown family `{0}` (expected uniform, gaussian or cyclic)")]
    UnknownFamily(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in {source_name} at {location}: {message}")]
    Format {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("truncated payload in {source_name}: expected {expected} bytes, found {actual}")]
    Truncated {
        source_name: String,
        expected: usize,
        actual: usize,
    },

    #[error("symmetry profile does not cover class {0}")]
    MissingClass(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("k = {k} must be smaller than the index size {size}")]
    InvalidK { k: usize, size: usize },

    #[error("family mismatch: expected {expected}, found {found}")]
    FamilyMismatch { expected: String, found: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (l1 = {l1}, aux = {aux})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        l1: f64,
        aux: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(
        source_name: impl Into<String>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            source_name: source_name.into(),
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
