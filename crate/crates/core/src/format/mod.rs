//! On-disk formats: SYMT tensor blobs, IDX corpora and flat `key = value` text.

pub mod idx;
pub mod kv;
pub mod symt;

pub use idx::{parse_idx, IdxTensor};
pub use symt::{Blob, BlobData};

use std::path::Path;

use crate::error::Error;

/// Converts a CSV error into a located format error (or an I/O error).
pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let location = e
        .position()
        .map(|p| format!("line {}", p.line()))
        .unwrap_or_else(|| "unknown line".to_string());
    if let csv::ErrorKind::Io(_) = e.kind() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!()
    }
    Error::format(path.display().to_string(), location, e.to_string())
}
