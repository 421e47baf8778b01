//! The VTEN tensor format: magic `VTEN`, a version byte, a rank byte, the
//! extents as little-endian `u32` and the row-major payload as little-endian
//! `f32`.

use std::fs;
use std::path::Path;

use alignkit_core::tensor::Tensor;

use crate::error::{format_err, io_err, Result};

pub const MAGIC: &[u8; 4] = b"VTEN";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(4 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one record from the front of `bytes`; returns the tensor and the
/// number of bytes consumed. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Tensor, usize)> {
    let short = || format_err(path, "truncated VTEN record");
    if bytes.len() < 6 {
        return Err(short());
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, "missing VTEN magic"));
    }
    if bytes[4] != VERSION {
        return Err(format_err(path, format!("unsupported VTEN version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let mut at = 6;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes.get(at..at + 4).ok_or_else(short)?;
        dims.push(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize);
        at += 4;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(path, "VTEN extents overflow"))?;
    let payload = bytes.get(at..at + 4 * n).ok_or_else(short)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    let t = Tensor::new(&dims, data).map_err(|e| format_err(path, e.to_string()))?;
    Ok((t, at + 4 * n))
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf);
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (t, used) = decode(&bytes, path)?;
    if used != bytes.len() {
        return Err(format_err(path, "trailing bytes after VTEN record"));
    }
    Ok(t)
}
