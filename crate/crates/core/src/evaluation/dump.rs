//! Raw tensor dumps: `FRNT` magic, `u8` dtype (1 = f32), `u8` rank, `u32` LE dims, f32 LE row-major payload.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{FrinetError, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"FRNT";
const DTYPE_F32: u8 = 1;

pub type DumpTensor = ArrayD<f32>;

pub fn encode_dump(tensor: &DumpTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * tensor.ndim() + 4 * tensor.len());
    out.extend_from_slice(DUMP_MAGIC);
    out.push(DTYPE_F32);
    out.push(tensor.ndim() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dump(bytes: &[u8], path: &Path) -> Result<DumpTensor> {
    let bad = |m: &str| FrinetError::format(path, m.to_string());
    if bytes.len() < 6 || &bytes[..4] != DUMP_MAGIC {
        return Err(bad("not a tensor dump"));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(bad("unsupported dtype"));
    }
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(bad("payload length does not match dims"));
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| bad(&e.to_string()))
}

pub fn write_dump(path: &Path, tensor: &DumpTensor) -> Result<()> {
    fs::write(path, encode_dump(tensor)).map_err(|e| FrinetError::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<DumpTensor> {
    let bytes = fs::read(path).map_err(|e| FrinetError::io(path, e))?;
    decode_dump(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let t =
            ArrayD::from_shape_vec(IxDyn(&[2, 1, 3]), vec![0.5f32, -1.0, 2.0, 3.0, 4.0, f32::MIN_POSITIVE]).unwrap();
        let bytes = encode_dump(&t);
        assert_eq!(&bytes[..6], b"FRNT\x01\x03");
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[18..22], &0.5f32.to_le_bytes());
        assert_eq!(decode_dump(&bytes, Path::new("x")).unwrap(), t);
        assert!(decode_dump(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }
}
