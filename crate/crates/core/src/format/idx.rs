//! IDX files, the distribution format of MNIST-style corpora.
//!
//! Only unsigned-byte tensors are supported: image files (magic `0x00000803`,
//! dims count × rows × cols) and label files (magic `0x00000801`, dim count).
//! Dimensions are big-endian u32.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], source_name: &str) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            source_name: source_name.to_string(),
            expected: 4,
            actual: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    let ndim = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => {
            return Err(Error::format(
                source_name,
                "offset 0",
                format!("unsupported IDX magic 0x{other:08x}"),
            ));
        }
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated {
            source_name: source_name.to_string(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            source_name: source_name.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header..expected].to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, &path.display().to_string())
}

/// Standard MNIST file names for a split (`train` or `t10k`).
pub fn mnist_file_names(prefix: &str) -> (String, String) {
    (
        format!("{prefix}-images-idx3-ubyte"),
        format!("{prefix}-labels-idx1-ubyte"),
    )
}

/// Paths of the image/label pair under `dir`, or an error naming every missing file.
pub fn locate_mnist(dir: &Path, prefix: &str) -> Result<(PathBuf, PathBuf)> {
    let (img, lbl) = mnist_file_names(prefix);
    let (img, lbl) = (dir.join(img), dir.join(lbl));
    let missing: Vec<String> = [&img, &lbl]
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "IDX corpus incomplete, expected file(s): {}",
            missing.join(", ")
        )));
    }
    Ok((img, lbl))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images_file(n: u32, rows: u32, cols: u32, payload: usize) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for d in [n, rows, cols] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend((0..payload).map(|i| i as u8));
        b
    }

    #[test]
    fn parses_images() {
        let t = parse_idx(&images_file(2, 3, 3, 18), "img").unwrap();
        assert_eq!(t.dims, vec![2, 3, 3]);
        assert_eq!(t.data, (0..18).collect::<Vec<u8>>());
    }

    #[test]
    fn parses_labels() {
        let mut b = vec![0, 0, 8, 1, 0, 0, 0, 5];
        b.extend([1, 2, 3, 4, 5]);
        let t = parse_idx(&b, "lbl").unwrap();
        assert_eq!(t.dims, vec![5]);
        assert_eq!(t.data.len(), 5);
    }

    #[test]
    fn rejects_unsupported_magic() {
        let b = [0, 0, 8, 2, 0, 0, 0, 0];
        assert!(matches!(parse_idx(&b, "x"), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_truncation() {
        assert!(matches!(
            parse_idx(&images_file(2, 3, 3, 17), "img"),
            Err(Error::Truncated { expected: 34, actual: 33, .. })
        ));
        assert!(matches!(parse_idx(&[0, 0, 8, 3, 0], "img"), Err(Error::Truncated { .. })));
    }

    #[test]
    fn missing_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = locate_mnist(dir.path(), "train").unwrap_err().to_string();
        assert!(err.contains("train-images-idx3-ubyte") && err.contains("train-labels-idx1-ubyte"));
    }
}
