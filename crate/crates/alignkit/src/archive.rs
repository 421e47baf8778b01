//! Weight archives: a directory holding `weights.vten`, the concatenated VTEN
//! records, and `weights.json`, an index of names, byte offsets and extents
//! plus the model layout.

use std::fs;
use std::path::Path;

use alignkit_core::align::{AlignConfig, AlignWeights};
use alignkit_core::pipeline::{PipelineConfig, PipelineWeights};
use alignkit_core::synth::stream_rng;
use alignkit_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};
use crate::vten;

pub const DATA_FILE: &str = "weights.vten";
pub const INDEX_FILE: &str = "weights.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Pipeline { scale: usize, levels: usize, groups: usize },
    Align { channels: usize, levels: usize, groups: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub offset: u64,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub format: String,
    pub version: u32,
    pub model: Model,
    pub tensors: Vec<Entry>,
}

pub fn write(dir: &Path, model: Model, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            offset: data.len() as u64,
            dims: t.dims().to_vec(),
        });
        vten::encode(t, &mut data);
    }
    let index = Index {
        format: "alignkit-weights".into(),
        version: 1,
        model,
        tensors: entries,
    };
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, data).map_err(io_err(&data_path))?;
    let index_path = dir.join(INDEX_FILE);
    let json = serde_json::to_vec_pretty(&index).expect("index serialises");
    fs::write(&index_path, json).map_err(io_err(&index_path))
}

pub fn read_index(dir: &Path) -> Result<Index> {
    let path = dir.join(INDEX_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json { path, source })
}

/// Reads every tensor named in the index, in index order.
pub fn read(dir: &Path) -> Result<(Index, Vec<(String, Tensor)>)> {
    let index = read_index(dir)?;
    let path = dir.join(DATA_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let mut out = Vec::with_capacity(index.tensors.len());
    for e in &index.tensors {
        let start = usize::try_from(e.offset).map_err(|_| format_err(&path, "offset out of range"))?;
        let rest = bytes
            .get(start..)
            .ok_or_else(|| format_err(&path, format!("offset of {} is past the end", e.name)))?;
        let (t, _) = vten::decode(rest, &path)?;
        if t.dims() != e.dims.as_slice() {
            return Err(format_err(&path, format!("{} has dims {:?}, index says {:?}", e.name, t.dims(), e.dims)));
        }
        out.push((e.name.clone(), t));
    }
    Ok((index, out))
}

/// Copies archived tensors into `visit`'s parameters by name; every parameter
/// must be present with matching extents.
fn fill(
    dir: &Path,
    tensors: Vec<(String, Tensor)>,
    visit: impl FnOnce(&mut dyn FnMut(String, &mut Tensor)),
) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut failure: Option<String> = None;
    visit(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(&name) {
            Some(src) if src.dims() == t.dims() => *t = src,
            Some(src) => failure = Some(format!("{name} has dims {:?}, expected {:?}", src.dims(), t.dims())),
            None => failure = Some(format!("{name} is missing")),
        }
    });
    if let Some(reason) = failure {
        return Err(format_err(&dir.join(INDEX_FILE), reason));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(format_err(&dir.join(INDEX_FILE), format!("unexpected tensor {extra}")));
    }
    Ok(())
}

pub fn save_pipeline(dir: &Path, w: &PipelineWeights, cfg: &PipelineConfig) -> Result<()> {
    let mut tensors = Vec::new();
    w.for_each_param(&mut |name, t| tensors.push((name, t)));
    let model = Model::Pipeline {
        scale: cfg.scale,
        levels: cfg.align.levels,
        groups: cfg.align.groups,
    };
    write(dir, model, &tensors)
}

pub fn load_pipeline(dir: &Path) -> Result<(PipelineWeights, PipelineConfig)> {
    let (index, tensors) = read(dir)?;
    let Model::Pipeline { scale, levels, groups } = index.model else {
        return Err(format_err(&dir.join(INDEX_FILE), "archive does not hold pipeline weights"));
    };
    let mut cfg = PipelineConfig::new(scale);
    cfg.align.levels = levels;
    cfg.align.groups = groups;
    let mut w = PipelineWeights::zeros(&cfg)?;
    fill(dir, tensors, |f| w.for_each_param_mut(f))?;
    Ok((w, cfg))
}

pub fn save_align(dir: &Path, w: &AlignWeights, channels: usize, cfg: &AlignConfig) -> Result<()> {
    let mut tensors = Vec::new();
    w.for_each_param("align", &mut |name, t| tensors.push((name, t)));
    let model = Model::Align {
        channels,
        levels: cfg.levels,
        groups: cfg.groups,
    };
    write(dir, model, &tensors)
}

/// Returns the weights and the archived channel count; `cfg` receives the
/// archived level and group counts.
pub fn load_align(dir: &Path, cfg: &mut AlignConfig) -> Result<(AlignWeights, usize)> {
    let (index, tensors) = read(dir)?;
    let Model::Align { channels, levels, groups } = index.model else {
        return Err(format_err(&dir.join(INDEX_FILE), "archive does not hold alignment weights"));
    };
    cfg.levels = levels;
    cfg.groups = groups;
    let mut w = AlignWeights::new(channels, cfg, &mut stream_rng(0, 0));
    fill(dir, tensors, |f| w.for_each_param_mut("align", f))?;
    Ok((w, channels))
}
