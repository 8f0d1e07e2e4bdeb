//! MPT1 tensor files.
//!
//! ```text
//! 0..4   magic "MPT1"
//! 4      dtype code, 1 = IEEE-754 single, little endian
//! 5      rank
//! 6..8   zero padding
//! 8..    rank × u32-LE dims, then the row-major payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MPT1";
pub const DTYPE_F32: u8 = 1;
const HEADER: usize = 8;

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < HEADER {
        return Err(Error::format("header", format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format("magic", "bad magic"));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(Error::format("dtype", format!("unsupported dtype code {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(Error::format("rank", "rank must be at least 1"));
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::format("padding", "header padding bytes must be zero"));
    }
    let dims_end = HEADER + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::format("dims", format!("truncated dims: need {rank} entries")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for chunk in bytes[HEADER..dims_end].chunks_exact(4) {
        let d = u32::from_le_bytes(chunk.try_into().expect("chunk of 4")) as usize;
        if d == 0 {
            return Err(Error::format("dims", "zero-sized dimension"));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::format("dims", "element count overflows"))?;
        shape.push(d);
    }
    let payload = &bytes[dims_end..];
    match numel.checked_mul(4) {
        Some(n) if n == payload.len() => {}
        _ => {
            return Err(Error::format(
                "payload",
                format!("expected {numel} f32 values, found {} bytes", payload.len()),
            ))
        }
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::contract("rank too large for MPT1"));
    }
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn payload_layout_for_two_by_two() {
        let t = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..8], &[b'M', b'P', b'T', b'1', 1, 2, 0, 0]);
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 2, 0, 0, 0]);
        let payload = &bytes[16..];
        assert_eq!(payload.len(), 16);
        assert_eq!(&payload[..4], &1.0f32.to_le_bytes());
        assert_eq!(&payload[12..], &4.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic_and_dtype() {
        let t = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let mut bytes = encode_tensor(&t);
        bytes[3] = b'X';
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        let mut bytes = encode_tensor(&t);
        bytes[4] = 2;
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format { field: "dtype", .. })));
        let bytes = encode_tensor(&t);
        assert!(matches!(
            decode_tensor(&bytes[..bytes.len() - 1]),
            Err(Error::Format { field: "payload", .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mpt");
        let t = Tensor::from_fn(&[1, 3, 4], |i| i as f32 * -0.25);
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        assert!(matches!(read_tensor(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..5), seed in any::<u32>()) {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = (0..numel)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
