//! SYMT tensor blobs.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SYMT" | u32 version = 1 | u8 dtype (0 = f32, 1 = u8) | u8 ndim | ndim x u32 dims | payload
//! ```
//!
//! The payload is row-major. Encoding is bit-exact: `decode(encode(b)) == b`
//! including NaN payload bits.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SYMT";
pub const VERSION: u32 = 1;
const HEADER_FIXED: usize = 4 + 4 + 1 + 1;

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl BlobData {
    fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            BlobData::F32(_) => 0,
            BlobData::U8(_) => 1,
        }
    }
}

/// An n-dimensional tensor as stored in a SYMT blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    dims: Vec<usize>,
    data: BlobData,
}

impl Blob {
    pub fn new(dims: Vec<usize>, data: BlobData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("{} dimensions exceed the SYMT limit", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Shape(format!("dimension in {dims:?} exceeds u32")));
        }
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, BlobData::F32(data))
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, BlobData::U8(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &BlobData {
        &self.data
    }

    pub fn into_f32(self, source_name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.data {
            BlobData::F32(v) => Ok((self.dims, v)),
            BlobData::U8(_) => Err(Error::format(source_name, "offset 8", "expected dtype f32, found u8")),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let elem = match self.data {
            BlobData::F32(_) => 4,
            BlobData::U8(_) => 1,
        };
        let mut out = Vec::with_capacity(HEADER_FIXED + 4 * self.dims.len() + elem * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            BlobData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
            BlobData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8], source_name: &str) -> Result<Self> {
        let truncated = |expected: usize| Error::Truncated {
            source_name: source_name.to_string(),
            expected,
            actual: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(truncated(HEADER_FIXED));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(
                source_name,
                "offset 0",
                format!("bad magic {:02x?}, expected \"SYMT\"", &bytes[..4]),
            ));
        }
        if bytes.len() < HEADER_FIXED {
            return Err(truncated(HEADER_FIXED));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(source_name, "offset 4", format!("unsupported version {version}")));
        }
        let dtype = bytes[8];
        let ndim = bytes[9] as usize;
        let header = HEADER_FIXED + 4 * ndim;
        if bytes.len() < header {
            return Err(truncated(header));
        }
        let dims: Vec<usize> = bytes[HEADER_FIXED..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count: usize = dims.iter().product();
        let elem = match dtype {
            0 => 4,
            1 => 1,
            other => {
                return Err(Error::format(source_name, "offset 8", format!("unknown dtype {other}")));
            }
        };
        let expected = header + count * elem;
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(Error::format(
                source_name,
                format!("offset {expected}"),
                format!("{} trailing bytes after payload", bytes.len() - expected),
            ));
        }
        let payload = &bytes[header..];
        let data = match dtype {
            0 => BlobData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            ),
            _ => BlobData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let b = Blob::f32(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = b.encode();
        let mut expect = b"SYMT".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 0, 0, 2, 2, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Blob::u8(vec![3], vec![1, 2, 3]).unwrap().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Blob::decode(&bad, "t"), Err(Error::Format { location, .. }) if location == "offset 0"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Blob::decode(&bad, "t"), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(matches!(Blob::decode(&bad, "t"), Err(Error::Format { .. })));
        assert!(matches!(
            Blob::decode(&bytes[..bytes.len() - 1], "t"),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Blob::decode(&long, "t"), Err(Error::Format { .. })));
    }

    #[test]
    fn shape_must_match_payload() {
        assert!(Blob::f32(vec![2, 2], vec![0.0; 3]).is_err());
        let scalar = Blob::f32(vec![], vec![4.0]).unwrap();
        assert_eq!(Blob::decode(&scalar.encode(), "s").unwrap(), scalar);
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u32>(), 0..64)) {
            let n = bits.len();
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let blob = Blob::f32(vec![n], data).unwrap();
            let back = Blob::decode(&blob.encode(), "p").unwrap();
            let BlobData::F32(v) = back.data() else { panic!("dtype changed") };
            prop_assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), bits);
        }

        #[test]
        fn u8_round_trip(rows in 0usize..5, cols in 0usize..5, seed in any::<u8>()) {
            let data: Vec<u8> = (0..rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let blob = Blob::u8(vec![rows, cols], data).unwrap();
            prop_assert_eq!(Blob::decode(&blob.encode(), "p").unwrap(), blob);
        }
    }
}
