//! The `SBTN` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"SBTN"
//! version u8   (1)
//! dtype   u8   (0 = f32, 1 = f64)
//! rank    u8
//! dims    rank x u32
//! payload row-major values of the given dtype
//! ```
//!
//! Feature files are written as f32. Checkpoints use f64 so that a reloaded
//! model reproduces its outputs bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SBTN";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(tensor: &Tensor, dtype: Dtype, out: &mut impl Write) -> std::io::Result<()> {
    let rank = u8::try_from(tensor.rank())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255"))?;
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION, dtype as u8, rank])?;
    for &d in tensor.dims() {
        let d = u32::try_from(d).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "dim exceeds u32")
        })?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.numel() * dtype.width());
    match dtype {
        Dtype::F32 => {
            for &v in tensor.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.write_all(&buf)
}

/// Decodes one container from the front of `input`, returning the tensor, its
/// stored dtype, and the number of bytes consumed.
pub fn decode(input: &[u8]) -> std::result::Result<(Tensor, Dtype, usize), String> {
    if input.len() < 7 || &input[..4] != MAGIC {
        return Err("missing SBTN magic".into());
    }
    if input[4] != VERSION {
        return Err(format!("unsupported version {}", input[4]));
    }
    let dtype = Dtype::from_code(input[5]).ok_or_else(|| format!("unknown dtype code {}", input[5]))?;
    let rank = input[6] as usize;
    let mut pos = 7;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let bytes = input
            .get(pos..pos + 4)
            .ok_or("truncated dims")?;
        dims.push(u32::from_le_bytes(bytes.try_into().unwrap()) as usize);
        pos += 4;
    }
    let numel: usize = dims.iter().product();
    let len = numel * dtype.width();
    let payload = input.get(pos..pos + len).ok_or("truncated payload")?;
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let tensor = Tensor::new(&dims, data).map_err(|e| e.to_string())?;
    Ok((tensor, dtype, pos + len))
}

pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let mut buf = Vec::new();
    encode(tensor, dtype, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (tensor, _, used) = decode(&bytes).map_err(|r| Error::format(path, r))?;
    if used != bytes.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        encode(&t, Dtype::F32, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"SBTN");
        assert_eq!(&buf[4..7], &[1, 0, 2]);
        assert_eq!(&buf[7..11], &2u32.to_le_bytes());
        assert_eq!(&buf[11..15], &3u32.to_le_bytes());
        assert_eq!(&buf[15..19], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 15 + 6 * 4);
    }

    #[test]
    fn f64_round_trip_is_bitwise() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| (i as f64).sin() / 3.0);
        let mut buf = Vec::new();
        encode(&t, Dtype::F64, &mut buf).unwrap();
        let (back, dtype, used) = decode(&buf).unwrap();
        assert_eq!(dtype, Dtype::F64);
        assert_eq!(used, buf.len());
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"NOPE\x01\x00\x01").is_err());
        let t = Tensor::ones(&[4]);
        let mut buf = Vec::new();
        encode(&t, Dtype::F32, &mut buf).unwrap();
        assert!(decode(&buf[..buf.len() - 1]).is_err());
    }
}
