//! Self-describing single-tensor binary format.
//!
//! Layout, all integers little-endian:
//! `"COST"` · version `u32` · dtype `u8` · ndim `u8` · dims `u32 × ndim` ·
//! row-major payload · CRC32 of the payload `u32`.

use std::path::Path;

use cost_tensor::{DType, Element, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"COST";
pub const VERSION: u32 = 1;

/// A decoded tensor of either supported precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            AnyTensor::F64(_) => Err(CliError::DType(DType::F64.tag())),
        }
    }

    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            AnyTensor::F32(_) => Err(CliError::DType(DType::F32.tag())),
        }
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(CliError::Image(format!("rank {} does not fit the header", t.rank())));
    }
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + t.numel() * T::DTYPE.size() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| CliError::Truncated { needed: d, available: u32::MAX as usize })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    let start = out.len();
    T::to_le_bytes_vec(t.data(), &mut out);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CliError::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes one tensor from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(CliError::BadMagic { expected: "COST" });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CliError::Version(version));
    }
    let tag = c.take(1)?[0];
    let dtype = DType::from_tag(tag).ok_or(CliError::DType(tag))?;
    let ndim = c.take(1)?[0] as usize;
    let dims = (0..ndim).map(|_| Ok(c.u32()? as usize)).collect::<Result<Vec<_>>>()?;
    let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CliError::Truncated {
        needed: usize::MAX,
        available: bytes.len(),
    })?;
    let payload = c.take(numel.checked_mul(dtype.size()).unwrap_or(usize::MAX))?;
    let stored = c.u32()?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CliError::Crc { stored, computed });
    }
    let t = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(dims, payload.chunks_exact(4).map(f32::from_le_chunk).collect())?),
        DType::F64 => AnyTensor::F64(Tensor::new(dims, payload.chunks_exact(8).map(f64::from_le_chunk).collect())?),
    };
    Ok((t, c.pos))
}

pub fn write<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(t)?).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(CliError::Checkpoint(format!("{} trailing bytes after tensor", bytes.len() - used)));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cost_tensor::Rng;

    #[test]
    fn header_layout() {
        let t: Tensor<f32> = Tensor::new([2], vec![1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"COST");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!((b[8], b[9]), (0, 1));
        assert_eq!(u32::from_le_bytes(b[10..14].try_into().unwrap()), 2);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 14 + 8 + 4);
    }

    #[test]
    fn truncation_is_reported() {
        let t: Tensor<f64> = Rng::new(0).gaussian([3]).unwrap();
        let b = encode(&t).unwrap();
        for cut in [0, 3, 9, 20, b.len() - 1] {
            assert!(decode(&b[..cut]).is_err(), "cut {cut}");
        }
    }
}
