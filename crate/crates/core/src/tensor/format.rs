//! Binary tensor records.
//!
//! Layout: 8-byte magic `ABMTENSR`, `u8` dtype tag (0 = f32, 1 = f64),
//! `u8` rank, `rank` little-endian `u32` dims, then the values in row-major
//! order as little-endian IEEE-754.

use std::io::{Read, Write};

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ABMTENSR";

/// A tensor whose element type is only known at run time.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl<T: Element> From<&Tensor<T>> for AnyTensor {
    fn from(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Format(format!("rank {} does not fit in u8", t.rank())))?;
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.tag());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn write_tensor<T: Element>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    let bytes = encode(t).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
    w.write_all(&bytes)
}

/// Reads a full record from a stream.
pub fn read_tensor(r: &mut impl Read) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    let (t, used) = read_tensor_at(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor record",
            bytes.len() - used
        )));
    }
    Ok(t)
}

/// Decodes the record starting at `offset`; returns it with its byte length.
pub fn read_tensor_at(bytes: &[u8], offset: u64) -> Result<(AnyTensor, usize)> {
    let len = bytes.len() as u64;
    let need = |at: u64, n: u64| -> Result<()> {
        if at.checked_add(n).is_none_or(|end| end > len) {
            Err(Error::BlobBounds {
                offset: at,
                needed: n,
                len,
            })
        } else {
            Ok(())
        }
    };
    need(offset, 10)?;
    let start = offset as usize;
    if &bytes[start..start + 8] != MAGIC {
        return Err(Error::Format(format!("bad magic at offset {offset}")));
    }
    let dtype = DType::from_tag(bytes[start + 8])?;
    let rank = bytes[start + 9] as usize;
    need(offset + 10, 4 * rank as u64)?;
    let mut pos = start + 10;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
        shape.push(d as usize);
        pos += 4;
    }
    let count: u64 = shape.iter().map(|&d| d as u64).product();
    let payload = count
        .checked_mul(dtype.size() as u64)
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    need(pos as u64, payload)?;
    let raw = &bytes[pos..pos + payload as usize];
    let tensor = match dtype {
        DType::F32 => AnyTensor::F32(decode_values(shape, raw)?),
        DType::F64 => AnyTensor::F64(decode_values(shape, raw)?),
    };
    Ok((tensor, pos + payload as usize - start))
}

fn decode_values<T: Element>(shape: Vec<usize>, raw: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_fn(vec![2, 3], |i| i as f32);
        let b = encode(&t).unwrap();
        assert_eq!(&b[..8], b"ABMTENSR");
        assert_eq!(b[8], 0);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..14], &2u32.to_le_bytes());
        assert_eq!(&b[14..18], &3u32.to_le_bytes());
        assert_eq!(b.len(), 18 + 6 * 4);
        assert_eq!(&b[22..26], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_record_is_out_of_bounds() {
        let t = Tensor::<f64>::from_fn(vec![4], |i| i as f64);
        let b = encode(&t).unwrap();
        let err = read_tensor_at(&b[..b.len() - 3], 0).unwrap_err();
        assert!(matches!(err, Error::BlobBounds { .. }), "{err}");
    }

    #[test]
    fn bad_magic() {
        let mut b = encode(&Tensor::<f64>::zeros(vec![1])).unwrap();
        b[0] = b'X';
        assert!(matches!(read_tensor_at(&b, 0), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(dims in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let t = Tensor::<f64>::from_fn(dims.clone(), |i| ((seed.wrapping_add(i as u64)) as f64).sin() * 1e3);
            let bytes = encode(&t).unwrap();
            let (back, used) = read_tensor_at(&bytes, 0).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back.to::<f64>().data().len(), n);
            prop_assert_eq!(encode(&back.to::<f64>()).unwrap(), bytes);
        }
    }
}
