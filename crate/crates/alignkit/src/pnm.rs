//! Binary 8-bit PPM (P6) and PGM (P5), mapped linearly to `[0, 1]`.

use std::fs;
use std::path::Path;

use alignkit_core::tensor::Tensor;

use crate::error::{format_err, io_err, Result};

/// `(1, H, W)` is written as PGM, `(3, H, W)` as PPM. Values are clamped and
/// rounded to the nearest level.
pub fn encode(t: &Tensor) -> Option<Vec<u8>> {
    let d = t.dims();
    if d.len() != 3 || !(d[0] == 1 || d[0] == 3) {
        return None;
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    out.reserve(c * h * w);
    for i in 0..h * w {
        for ci in 0..c {
            let v = t.plane(ci)[i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Some(out)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode(t).ok_or_else(|| format_err(path, format!("cannot store dims {:?} as PPM/PGM", t.dims())))?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
            if bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                at += 1;
            }
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(format_err(path, "truncated PNM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| format_err(path, "bad PNM header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    at += 1;
    let c = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format_err(path, format!("unsupported PNM magic {m:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad PNM number {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(format_err(path, format!("only 8-bit PNM is supported (maxval {maxval})")));
    }
    let raster = bytes
        .get(at..at + c * h * w)
        .ok_or_else(|| format_err(path, "truncated PNM raster"))?;
    Ok(Tensor::from_fn_chw(c, h, w, |ci, y, x| raster[(y * w + x) * c + ci] as f32 / 255.0))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}
