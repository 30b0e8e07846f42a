//! `CMFT` binary tensor dumps.
//!
//! Layout: the four magic bytes `CMFT`, the rank as a little-endian `u32`,
//! each dimension as a little-endian `u32`, then the values as little-endian
//! IEEE-754 `f32` in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CMFT";

#[derive(Debug, Clone, PartialEq)]
pub struct CmftTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl CmftTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::dim("CmftTensor::new", &dims, &[values.len()]));
        }
        Ok(Self { dims, values })
    }

    /// Rounds each value to `f32`.
    pub fn from_f64(dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err("missing CMFT magic".into());
        }
        let word = |i: usize| -> std::result::Result<u32, String> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| "truncated header".to_string())
        };
        let rank = word(4)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            dims.push(word(8 + 4 * i)? as usize);
        }
        let start = 8 + 4 * rank;
        let n: usize = dims.iter().product();
        let body = &bytes[start.min(bytes.len())..];
        if body.len() != 4 * n {
            return Err(format!(
                "expected {} value bytes for dims {:?}, found {}",
                4 * n,
                dims,
                body.len()
            ));
        }
        let values = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { dims, values })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|detail| Error::Format {
            path: path.to_path_buf(),
            detail,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = CmftTensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.encode();
        assert_eq!(&b[..4], b"CMFT");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut b = CmftTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().encode();
        b.pop();
        assert!(CmftTensor::decode(&b).is_err());
        assert!(CmftTensor::decode(b"XXXX\0\0\0\0").is_err());
    }

    #[test]
    fn rank_zero_scalar() {
        let t = CmftTensor::new(vec![], vec![4.0]).unwrap();
        assert_eq!(CmftTensor::decode(&t.encode()).unwrap(), t);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let values: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = CmftTensor::new(dims, values).unwrap();
            let back = CmftTensor::decode(&t.encode()).unwrap();
            prop_assert_eq!(back.dims, t.dims.clone());
            let a: Vec<u32> = back.values.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
