//! Raw tensor container ("CTS-T1").
//!
//! Layout: 8-byte magic `CTSTEN01`, dtype byte (0 = f32 LE, 1 = f64 LE),
//! rank byte, `rank` little-endian u64 extents, then the row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use super::{numel_of, Scalar, Tensor};
use crate::error::{CtsError, Result};

pub const MAGIC: &[u8; 8] = b"CTSTEN01";

fn dtype_width(dtype: u8) -> Option<usize> {
    match dtype {
        0 => Some(4),
        1 => Some(8),
        _ => None,
    }
}

/// Serialized size of a tensor in bytes.
pub fn encoded_len<T: Scalar>(t: &Tensor<T>) -> usize {
    10 + 8 * t.rank() + t.numel() * dtype_width(T::DTYPE).unwrap()
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(CtsError::data(format!("rank {} does not fit the format", t.rank())));
    }
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    T::to_le_bytes_vec(t.data(), out);
    Ok(())
}

/// Decodes one tensor from the front of `bytes`; returns it and the number
/// of bytes consumed.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let short = || CtsError::data("truncated CTS-T1 tensor");
    if bytes.len() < 10 {
        return Err(short());
    }
    if &bytes[..8] != MAGIC {
        return Err(CtsError::data("bad CTS-T1 magic"));
    }
    let dtype = bytes[8];
    if dtype != T::DTYPE {
        return Err(CtsError::data(format!(
            "CTS-T1 dtype {} does not match requested element type (dtype {})",
            dtype,
            T::DTYPE
        )));
    }
    let width = dtype_width(dtype).ok_or_else(|| CtsError::data(format!("unknown dtype {}", dtype)))?;
    let rank = bytes[9] as usize;
    let mut pos = 10;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes.get(pos..pos + 8).ok_or_else(short)?;
        shape.push(u64::from_le_bytes(chunk.try_into().unwrap()) as usize);
        pos += 8;
    }
    let n = numel_of(&shape);
    let payload = bytes.get(pos..pos + n * width).ok_or_else(short)?;
    let data = payload.chunks_exact(width).map(T::from_le_chunk).collect();
    pos += n * width;
    Ok((Tensor::from_parts(shape, data), pos))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(encoded_len(t));
    encode(t, &mut buf)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| CtsError::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CtsError::io(path, e))?;
    let (t, used) = decode(&buf)?;
    if used != buf.len() {
        return Err(CtsError::data(format!("{}: trailing bytes after tensor", path.display())));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode(&t, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"CTSTEN01");
        assert_eq!(buf[8], 0);
        assert_eq!(buf[9], 2);
        assert_eq!(&buf[10..18], &2u64.to_le_bytes());
        assert_eq!(&buf[18..26], &1u64.to_le_bytes());
        assert_eq!(&buf[26..30], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), encoded_len(&t));
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode::<f32>(b"NOTATENSOR").is_err());
        let t = Tensor::<f32>::ones(&[3]);
        let mut buf = Vec::new();
        encode(&t, &mut buf).unwrap();
        assert!(decode::<f32>(&buf[..buf.len() - 1]).is_err());
        assert!(decode::<f64>(&buf).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(shape in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let mut rng = crate::tensor::RngState::new(seed);
            let t = Tensor::<f32>::from_fn(&shape, |_| f32::from_bits(rand::RngCore::next_u32(&mut rng) & 0x7f7f_ffff));
            let mut buf = Vec::new();
            encode(&t, &mut buf).unwrap();
            let (back, used) = decode::<f32>(&buf).unwrap();
            prop_assert_eq!(used, buf.len());
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
