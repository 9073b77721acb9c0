//! OVDT tensor container.
//!
//! ```text
//! magic    4 bytes  "OVDT"
//! version  u32 LE   1
//! dtype    u8       0 = f32
//! ndim     u8
//! dims     ndim x u64 LE
//! payload  row-major f32 LE
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OVDT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// A decoded OVDT tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let n = numel(&dims)?;
        if n != data.len() {
            return Err(Error::schema(format!(
                "tensor of shape {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Integrity("not an OVDT file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::schema(format!("unsupported OVDT version {version}")));
        }
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::schema(format!("unsupported OVDT dtype {dtype}")));
        }
        let ndim = r.take(1)?[0] as usize;
        let dims: Vec<u64> = (0..ndim)
            .map(|_| r.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Result<_>>()?;
        let n = numel(&dims)?;
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::schema("tensor too large"))?)?;
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after OVDT payload",
                bytes.len() - r.pos
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn numel(dims: &[u64]) -> Result<usize> {
    if dims.len() > u8::MAX as usize {
        return Err(Error::schema("OVDT supports at most 255 dimensions"));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
        .ok_or_else(|| Error::schema(format!("tensor shape {dims:?} overflows")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("truncated OVDT file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        let mut expect = b"OVDT".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 0, 0, 2]);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn rejects_malformed() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.to_bytes();
        assert!(matches!(Tensor::from_bytes(&b[..b.len() - 1]), Err(Error::Integrity(_))));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(Tensor::from_bytes(&extra), Err(Error::Integrity(_))));
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&magic), Err(Error::Integrity(_))));
        let mut dtype = b.clone();
        dtype[8] = 1;
        assert!(matches!(Tensor::from_bytes(&dtype), Err(Error::Schema(_))));
        let mut version = b;
        version[4] = 2;
        assert!(matches!(Tensor::from_bytes(&version), Err(Error::Schema(_))));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn empty_dimension() {
        let t = Tensor::new(vec![0, 5], vec![]).unwrap();
        assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(dims in proptest::collection::vec(0u64..5, 0..4), seed in any::<u64>()) {
            let n: u64 = dims.iter().product();
            let mut state = seed;
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f32::from_bits((state >> 32) as u32)
                })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(&back.dims, &t.dims);
            prop_assert_eq!(
                back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
