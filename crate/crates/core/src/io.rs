//! Binary tensor files.
//!
//! Layout, all little-endian: magic `TQT1`, dtype code (`u8`), rank (`u8`),
//! `rank` dims as `u32`, then the raw elements in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Element};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TQT1";

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::DTYPE.width());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE as u8);
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

/// Reads the dtype recorded in a header without decoding the payload.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing TQT1 magic".into()));
    }
    DType::from_code(bytes[4]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let dtype = peek_dtype(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file has {dtype:?}, requested {:?}",
            T::DTYPE
        )));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let width = dtype.width();
    let body = &bytes[header..];
    if body.len() != n * width {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            body.len(),
            n * width
        )));
    }
    let data = body.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read_tensor<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![2, 1], vec![1i32, -2]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(
            bytes,
            vec![
                b'T', b'Q', b'T', b'1', 3, 2, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0xfe, 0xff, 0xff,
                0xff
            ]
        );
    }

    #[test]
    fn round_trip_f64() {
        let t = Tensor::new(vec![1, 2, 3], vec![0.5, -1.0, 3.25, 1e-300, -0.0, 7.0]).unwrap();
        let back: Tensor<f64> = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn rejects_wrong_dtype_and_truncation() {
        let t = Tensor::from_vec(vec![1.0f32, 2.0]);
        let bytes = encode(&t).unwrap();
        assert!(decode::<f64>(&bytes).is_err());
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f32>(b"NOPE").is_err());
    }
}
