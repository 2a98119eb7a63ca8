//! `MTSR` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes       | field                          |
//! |-------------|--------------------------------|
//! | 4           | magic `"MTSR"`                 |
//! | 4           | version (`u32`, currently 1)   |
//! | 4           | ndim (`u32`)                   |
//! | 4 · ndim    | dims (`u32` each)              |
//! | 8 · Π dims  | payload, `f64` row-major       |

use std::fs;
use std::path::Path;

use crate::error::{MooseError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MTSR";
pub const VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * t.ndim() + 8 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        let d32 = u32::try_from(d)
            .map_err(|_| MooseError::DimOverflow(t.shape().iter().map(|&d| d as u64).collect()))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, expected_total: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(MooseError::Truncated {
            expected: expected_total,
            found: bytes.len(),
        });
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    let b = take(bytes, 4, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode_tensor(mut bytes: &[u8]) -> Result<Tensor> {
    let magic = take(&mut bytes, 4, 4)?;
    if magic != MAGIC {
        return Err(MooseError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = read_u32(&mut bytes)?;
    if version != VERSION {
        return Err(MooseError::UnsupportedVersion(version));
    }
    let ndim = read_u32(&mut bytes)? as usize;
    let mut dims = Vec::with_capacity(ndim.min(64));
    for _ in 0..ndim {
        dims.push(read_u32(&mut bytes)? as u64);
    }
    let overflow = || MooseError::DimOverflow(dims.clone());
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
        .ok_or_else(overflow)?;
    let payload_len = numel.checked_mul(8).ok_or_else(overflow)?;
    if dims.contains(&0) {
        return Err(MooseError::InvalidShape {
            shape: dims.iter().map(|&d| d as usize).collect(),
            reason: "zero extent in tensor file".into(),
        });
    }
    if bytes.len() < payload_len {
        return Err(MooseError::Truncated {
            expected: payload_len,
            found: bytes.len(),
        });
    }
    let data = bytes[..payload_len]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}
