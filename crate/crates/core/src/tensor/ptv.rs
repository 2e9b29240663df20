//! `PTV1` tensor files: magic, dtype code, rank, little-endian u32 dims, then
//! the row-major little-endian payload.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"PTV1";

#[derive(Debug, Error)]
pub enum PtvError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a PTV1 file (bad magic)")]
    BadMagic,
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("dtype mismatch: file has code {found}, expected {expected}")]
    DtypeMismatch { found: u8, expected: u8 },
    #[error("truncated or oversized payload: expected {expected} bytes, found {found}")]
    BadLength { expected: usize, found: usize },
    #[error("dimension {0} does not fit in u32")]
    DimTooLarge(usize),
}

pub fn encode<T: Float>(t: &Tensor<T>) -> Result<Vec<u8>, PtvError> {
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + T::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        let d32 = u32::try_from(d).map_err(|_| PtvError::DimTooLarge(d))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<Tensor<T>, PtvError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(PtvError::BadMagic);
    }
    let dtype = bytes[4];
    if dtype > 1 {
        return Err(PtvError::UnknownDtype(dtype));
    }
    if dtype != T::DTYPE {
        return Err(PtvError::DtypeMismatch {
            found: dtype,
            expected: T::DTYPE,
        });
    }
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(PtvError::BadLength {
            expected: header,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 6 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let n: usize = shape.iter().product();
    let expected = header + n * T::BYTES;
    if bytes.len() != expected {
        return Err(PtvError::BadLength {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[header..].chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok(Tensor::new(shape, data).expect("length checked"))
}

pub fn write<T: Float>(path: &Path, t: &Tensor<T>) -> Result<(), PtvError> {
    let bytes = encode(t)?;
    fs::write(path, bytes).map_err(|source| PtvError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read<T: Float>(path: &Path) -> Result<Tensor<T>, PtvError> {
    let bytes = fs::read(path).map_err(|source| PtvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new([2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"PTV1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::zeros([3]);
        let mut b = encode(&t).unwrap();
        assert!(matches!(decode::<f32>(&b), Err(PtvError::DtypeMismatch { .. })));
        b.pop();
        assert!(matches!(decode::<f64>(&b), Err(PtvError::BadLength { .. })));
        b[0] = b'X';
        assert!(matches!(decode::<f64>(&b), Err(PtvError::BadMagic)));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64) >> 2))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back: Tensor<f64> = decode(&encode(&t).unwrap()).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
