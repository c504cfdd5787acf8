//! SCPT v1 binary tensor files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SCPT"
//! 4       1     version (1)
//! 5       1     dtype: 0 = f64, 1 = f32, 2 = u8
//! 6       1     ndim
//! 7       1     zero
//! 8       8*nd  dims, u64 little-endian
//! ...           row-major payload, little-endian
//! ```
//!
//! Files are self-delimiting, so several can be concatenated into one
//! stream (checkpoints do this).

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"SCPT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F64),
            1 => Some(DType::F32),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

/// Typed payload of an SCPT record.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScptTensor {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl ScptTensor {
    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F64(_) => DType::F64,
            Payload::F32(_) => DType::F32,
            Payload::U8(_) => DType::U8,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        ScptTensor {
            shape: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        ScptTensor {
            shape,
            payload: Payload::U8(data),
        }
    }

    /// Widen to an f64 tensor (lossless for every dtype).
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.payload {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn encode(&self) -> Vec<u8> {
        assert!(self.shape.len() <= u8::MAX as usize);
        let n = numel(&self.shape);
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.shape.len() + n * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype() as u8);
        out.push(self.shape.len() as u8);
        out.push(0);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Decode one record from the front of `bytes`; returns it and the number
    /// of bytes consumed. `path` is only used in error messages.
    pub fn decode_prefix(bytes: &[u8], path: &Path) -> Result<(ScptTensor, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::corrupt(path, "truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::corrupt(path, "bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: bytes[4] as u32,
                expected: VERSION as u32,
            });
        }
        let dtype = DType::from_code(bytes[5])
            .ok_or_else(|| Error::corrupt(path, format!("unknown dtype code {}", bytes[5])))?;
        let ndim = bytes[6] as usize;
        if bytes[7] != 0 {
            return Err(Error::corrupt(path, "non-zero pad byte"));
        }
        if ndim == 0 {
            return Err(Error::corrupt(path, "zero-dimensional tensor"));
        }
        let dims_end = HEADER_LEN + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::corrupt(path, "truncated dims"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let off = HEADER_LEN + 8 * i;
            let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            if d == 0 || d > usize::MAX as u64 {
                return Err(Error::corrupt(path, format!("invalid dimension {d}")));
            }
            shape.push(d as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::corrupt(path, "dimension overflow"))?;
        let payload_len = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::corrupt(path, "payload overflow"))?;
        let end = dims_end + payload_len;
        if bytes.len() < end {
            return Err(Error::corrupt(
                path,
                format!("truncated payload ({} of {payload_len} bytes)", bytes.len() - dims_end),
            ));
        }
        let raw = &bytes[dims_end..end];
        let payload = match dtype {
            DType::F64 => Payload::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F32 => Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => Payload::U8(raw.to_vec()),
        };
        Ok((ScptTensor { shape, payload }, end))
    }

    /// Decode a buffer holding exactly one record.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<ScptTensor> {
        let (t, used) = ScptTensor::decode_prefix(bytes, path)?;
        if used != bytes.len() {
            return Err(Error::corrupt(
                path,
                format!("{} trailing bytes", bytes.len() - used),
            ));
        }
        Ok(t)
    }
}

/// FNV-1a 64 over raw bytes; the checksum recorded in manifests and
/// checkpoint indexes.
pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Write one tensor; returns the checksum of the bytes written.
pub fn write_file(path: &Path, t: &ScptTensor) -> Result<u64> {
    let bytes = t.encode();
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(checksum(&bytes))
}

pub fn read_file(path: &Path) -> Result<ScptTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ScptTensor::decode(&bytes, path)
}

/// Read and verify against an expected checksum before decoding.
pub fn read_file_checked(path: &Path, expected: u64) -> Result<ScptTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let actual = checksum(&bytes);
    if actual != expected {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    ScptTensor::decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = ScptTensor::from_u8(vec![2, 3], vec![1, 2, 3, 4, 5, 6]);
        let b = t.encode();
        assert_eq!(&b[0..4], b"SCPT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(b[6], 2);
        assert_eq!(b[7], 0);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 3);
        assert_eq!(&b[24..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn f64_payload_is_little_endian() {
        let t = ScptTensor::from_tensor(&Tensor::scalar(1.0));
        let b = t.encode();
        assert_eq!(b[5], 0);
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let p = Path::new("x.scpt");
        let b = ScptTensor::from_tensor(&Tensor::ones(&[4])).encode();
        assert!(matches!(
            ScptTensor::decode(&b[..b.len() - 1], p),
            Err(Error::Corrupt { .. })
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(ScptTensor::decode(&bad, p).is_err());
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(ScptTensor::decode(&v2, p), Err(Error::Version { .. })));
        let mut dt = b;
        dt[5] = 9;
        assert!(ScptTensor::decode(&dt, p).is_err());
    }

    #[test]
    fn checksum_detects_bit_flip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.scpt");
        let sum = write_file(&path, &ScptTensor::from_tensor(&Tensor::ones(&[3, 3]))).unwrap();
        assert!(read_file_checked(&path, sum).is_ok());
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_file_checked(&path, sum),
            Err(Error::Checksum { .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shape in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::RngStream::new(seed);
            let n = numel(&shape);
            let f: Vec<f64> = (0..n).map(|_| rng.normal() * 1e3).collect();
            let t = ScptTensor { shape: shape.clone(), payload: Payload::F64(f) };
            prop_assert_eq!(&ScptTensor::decode(&t.encode(), Path::new("p")).unwrap(), &t);
            let u = ScptTensor::from_u8(shape, (0..n).map(|i| (i * 37 % 256) as u8).collect());
            prop_assert_eq!(&ScptTensor::decode(&u.encode(), Path::new("p")).unwrap(), &u);
        }
    }
}
