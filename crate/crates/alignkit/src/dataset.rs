//! Paired-sequence datasets on disk:
//!
//! ```text
//! manifest.json
//! hr/0000.ppm ...
//! lr/0000.ppm ...
//! gt/flow_0000.vten ...   low-resolution backward flows, one per frame gap
//! gt/misalign.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use alignkit_core::synth::{DegradeParams, PairedSequence};
use alignkit_core::tensor::{FlowField, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::{pnm, vten};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeRecord {
    pub focal_crop: f32,
    pub scale: usize,
    pub blur_sigma: f32,
    pub noise_sigma: f32,
    pub gain: [f32; 3],
    pub offset: [f32; 3],
    pub misalign: (f32, f32),
    pub seed: u64,
    pub quantize: bool,
}

impl From<&DegradeParams> for DegradeRecord {
    fn from(d: &DegradeParams) -> Self {
        Self {
            focal_crop: d.focal_crop,
            scale: d.scale,
            blur_sigma: d.blur_sigma,
            noise_sigma: d.noise_sigma,
            gain: d.gain,
            offset: d.offset,
            misalign: d.misalign,
            seed: d.seed,
            quantize: d.quantize,
        }
    }
}

impl From<&DegradeRecord> for DegradeParams {
    fn from(d: &DegradeRecord) -> Self {
        Self {
            focal_crop: d.focal_crop,
            scale: d.scale,
            blur_sigma: d.blur_sigma,
            noise_sigma: d.noise_sigma,
            gain: d.gain,
            offset: d.offset,
            misalign: d.misalign,
            seed: d.seed,
            quantize: d.quantize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub scale: usize,
    /// `[height, width]`.
    pub lr_size: [usize; 2],
    pub hr_size: [usize; 2],
    pub degrade: DegradeRecord,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Misalign {
    pub dx: f32,
    pub dy: f32,
}

fn frame_path(dir: &Path, branch: &str, t: usize) -> PathBuf {
    dir.join(branch).join(format!("{t:04}.ppm"))
}

fn flow_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("gt").join(format!("flow_{t:04}.vten"))
}

fn corrupt(dir: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptDataset {
        path: dir.to_path_buf(),
        reason: reason.into(),
    }
}

fn is_8bit(t: &Tensor) -> bool {
    t.data().iter().all(|&v| (0.0..=1.0).contains(&v) && (v * 255.0).round() / 255.0 == v)
}

/// Frames are stored as 8-bit images, so every frame must already sit on the
/// 8-bit grid (as `DegradeParams::quantize` produces); anything else is
/// rejected rather than silently rounded.
pub fn write_dataset(seq: &PairedSequence, dir: &Path) -> Result<()> {
    let first = seq.lr.first().ok_or_else(|| Error::Config("cannot write an empty sequence".into()))?;
    if seq.hr.len() != seq.lr.len() || seq.flows.len() + 1 != seq.lr.len() {
        return Err(Error::Config("frame and flow counts disagree".into()));
    }
    if !seq.lr.iter().chain(&seq.hr).all(is_8bit) {
        return Err(Error::Config("frames must be quantised to 8 bits before they are written".into()));
    }
    let dims = |t: &Tensor| [t.dims()[1], t.dims()[2]];
    for sub in ["hr", "lr", "gt"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    for (t, (lr, hr)) in seq.lr.iter().zip(&seq.hr).enumerate() {
        pnm::save(&frame_path(dir, "lr", t), lr)?;
        pnm::save(&frame_path(dir, "hr", t), hr)?;
    }
    for (t, f) in seq.flows.iter().enumerate() {
        vten::save(&flow_path(dir, t), f.as_tensor())?;
    }
    let (dx, dy) = seq.degrade.misalign;
    write_json(&dir.join("gt").join("misalign.json"), &Misalign { dx, dy })?;
    let manifest = Manifest {
        format: "alignkit-dataset".into(),
        version: 1,
        frames: seq.frames(),
        scale: seq.scale(),
        lr_size: dims(first),
        hr_size: dims(&seq.hr[0]),
        degrade: DegradeRecord::from(&seq.degrade),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| corrupt(dir, format!("cannot read {MANIFEST}: {e}")))?;
    serde_json::from_slice(&bytes).map_err(|e| corrupt(dir, format!("bad {MANIFEST}: {e}")))
}

pub fn read_dataset(dir: &Path) -> Result<PairedSequence> {
    let m = read_manifest(dir)?;
    if m.frames == 0 {
        return Err(corrupt(dir, "manifest lists no frames"));
    }
    let load_frame = |branch: &str, t: usize, size: [usize; 2]| -> Result<Tensor> {
        let f = pnm::load(&frame_path(dir, branch, t)).map_err(|e| corrupt(dir, e.to_string()))?;
        if f.dims() != [3, size[0], size[1]] {
            return Err(corrupt(dir, format!("{branch} frame {t} has dims {:?}", f.dims())));
        }
        Ok(f)
    };
    let mut lr = Vec::with_capacity(m.frames);
    let mut hr = Vec::with_capacity(m.frames);
    for t in 0..m.frames {
        lr.push(load_frame("lr", t, m.lr_size)?);
        hr.push(load_frame("hr", t, m.hr_size)?);
    }
    let flows = (0..m.frames - 1)
        .map(|t| {
            let raw = vten::load(&flow_path(dir, t)).map_err(|e| corrupt(dir, e.to_string()))?;
            let f = FlowField::new(raw).map_err(|e| corrupt(dir, format!("flow {t}: {e}")))?;
            if [f.height(), f.width()] != m.lr_size {
                return Err(corrupt(dir, format!("flow {t} does not match the low-resolution frames")));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let mis_path = dir.join("gt").join("misalign.json");
    let bytes = fs::read(&mis_path).map_err(|e| corrupt(dir, format!("cannot read gt/misalign.json: {e}")))?;
    let mis: Misalign = serde_json::from_slice(&bytes).map_err(|e| corrupt(dir, format!("bad gt/misalign.json: {e}")))?;
    let mut degrade = DegradeParams::from(&m.degrade);
    if degrade.scale != m.scale {
        return Err(corrupt(dir, "manifest scale disagrees with its degradation record"));
    }
    degrade.misalign = (mis.dx, mis.dy);
    Ok(PairedSequence { lr, hr, flows, degrade })
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_vec_pretty(value).expect("value serialises");
    fs::write(path, json).map_err(io_err(path))
}
