//! LDNT binary tensor container.
//!
//! Layout: magic `LDNT`, u8 dtype code (1 = f32, 2 = f64), u8 rank, `rank`
//! little-endian u32 extents, then the raw little-endian element data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"LDNT";

#[derive(Clone, Debug, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type (exact for f32 -> f64).
    pub fn into_tensor<T: Element>(self) -> Tensor<T> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for DynTensor {
    fn from(t: Tensor<f32>) -> Self {
        DynTensor::F32(t)
    }
}

impl From<Tensor<f64>> for DynTensor {
    fn from(t: Tensor<f64>) -> Self {
        DynTensor::F64(t)
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!(
            "rank {} does not fit in u8",
            t.rank()
        )));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.byte_size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        let e = u32::try_from(e)
            .map_err(|_| Error::Format(format!("extent {e} does not fit in u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    Ok(out)
}

fn decode_as<T: Element>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let width = T::DTYPE.width();
    let data = payload.chunks_exact(width).map(T::from_le_chunk).collect();
    Tensor::from_vec(&shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<DynTensor> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing LDNT magic".into()));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated LDNT header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let expected = count * dtype.width();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "LDNT payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            expected
        )));
    }
    Ok(match dtype {
        DType::F32 => DynTensor::F32(decode_as(shape, payload)?),
        DType::F64 => DynTensor::F64(decode_as(shape, payload)?),
    })
}

pub fn write_to<W: Write, T: Element>(mut w: W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t)?)?;
    Ok(())
}

pub fn read_from<R: Read>(mut r: R) -> Result<DynTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<DynTensor> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_vec(&[2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"LDNT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let t = Tensor::<f64>::zeros(&[3]);
        let mut b = encode(&t).unwrap();
        b.pop();
        assert!(matches!(decode(&b), Err(Error::Format(_))));
        assert!(matches!(decode(b"LDNX\x01\x00"), Err(Error::Format(_))));
        assert!(matches!(decode(b"LDNT\x07\x00"), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shape in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let len: usize = shape.iter().product();
            let mut s = seed;
            let data: Vec<f32> = (0..len)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f32::from_bits((s >> 32) as u32)
                })
                .collect();
            let t = Tensor::from_vec(&shape, data).unwrap();
            let back = decode(&encode(&t).unwrap()).unwrap();
            let DynTensor::F32(back) = back else { panic!("dtype changed") };
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
