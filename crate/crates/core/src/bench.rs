//! Desk-scale experiments with known ground truth: residual-flow learning on
//! a biased base flow, and the alignment ablation (base flow, plus residual
//! refinement, plus deformable resampling).
//!
//! Frames serve directly as the features and the hidden state, so alignment
//! quality can be measured against the current frame.

use alloc::vec;
use alloc::vec::Vec;

use crate::adastn::{adastn_head, uniform_params, PredictorWeights};
use crate::align::{build_pyramid, deform_sample, flow_pyramid, AlignConfig, AlignWeights};
use crate::conv::Conv2d;
use crate::error::{check_dim, invalid, Error, Result};
use crate::fit::{spsa, FitConfig, FitResult, ObjectiveKind};
use crate::flow::{endpoint_error, estimate_base_flow, interior_mask, FlowEstimatorConfig};
use crate::rectify::masked_l1;
use crate::sample::{double_flow_to, warp};
use crate::synth::{make_scene, SceneParams};
use crate::tensor::{FlowField, Tensor};

/// One frame pair: `warp(prev, gt) == cur` up to resampling.
#[derive(Clone, Debug)]
pub struct BenchPair {
    pub cur: Tensor,
    pub prev: Tensor,
    pub gt: FlowField,
    /// Estimated flow minus the injected bias.
    pub base: FlowField,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub seed: u64,
    pub pairs: usize,
    pub size: usize,
    /// Subtracted from every base flow, so the true residual is `+bias`.
    pub bias: (f32, f32),
    /// Border excluded from every error measurement.
    pub margin: usize,
    pub align: AlignConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            pairs: 3,
            size: 64,
            bias: (2.0, 0.0),
            margin: 8,
            align: AlignConfig {
                groups: 3,
                ..AlignConfig::default()
            },
        }
    }
}

/// Sub-pixel velocities, so resampling blur is part of the alignment error.
const VELOCITIES: [(f32, f32); 6] = [(1.5, 0.5), (-2.5, 1.5), (0.5, -3.5), (3.5, 2.5), (-1.5, -2.5), (2.5, -0.5)];

#[derive(Clone, Debug)]
pub struct Bench {
    pub cfg: BenchConfig,
    pub pairs: Vec<BenchPair>,
    mask: Vec<bool>,
    mask_t: Tensor,
    height: usize,
    width: usize,
}

impl Bench {
    /// Synthetic pairs from `cfg.seed`, one per velocity in turn.
    pub fn new(cfg: BenchConfig) -> Result<Self> {
        let n = cfg.size;
        let frames = (0..cfg.pairs)
            .map(|i| {
                let (vx, vy) = VELOCITIES[i % VELOCITIES.len()];
                let scene = make_scene(&SceneParams::new(cfg.seed + i as u64, n, n, 2).with_velocity(vx, vy))?;
                Ok((scene.frames[0].clone(), scene.frames[1].clone(), scene.flows[0].clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_frames(cfg, frames)
    }

    /// Pairs `(cur, prev, gt)` of equal-sized 3-channel frames with
    /// `warp(prev, gt) ≈ cur`. `cfg.size` and `cfg.pairs` are ignored.
    pub fn from_frames(mut cfg: BenchConfig, frames: Vec<(Tensor, Tensor, FlowField)>) -> Result<Self> {
        const OP: &str = "bench";
        let (h, w) = match frames.first() {
            Some((cur, _, _)) => {
                let (c, h, w) = cur.chw(OP)?;
                check_dim(OP, "channels", 3, c)?;
                (h, w)
            }
            None => return Err(Error::EmptySequence { op: OP }),
        };
        let flow_cfg: FlowEstimatorConfig = cfg.align.flow.fitted_to(h, w);
        let pairs = frames
            .into_iter()
            .map(|(cur, prev, gt)| {
                cur.check_same_dims(OP, &prev)?;
                check_dim(OP, "frame height", h, cur.dims()[1])?;
                check_dim(OP, "frame width", w, cur.dims()[2])?;
                let est = estimate_base_flow(&cur, &prev, &flow_cfg)?;
                let base = est.flow.sub(&FlowField::uniform(h, w, cfg.bias.0, cfg.bias.1))?;
                Ok(BenchPair { cur, prev, gt, base })
            })
            .collect::<Result<Vec<_>>>()?;
        cfg.pairs = pairs.len();
        let mask = interior_mask(h, w, cfg.margin);
        let mask_t = Tensor::new(&[1, h, w], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
        Ok(Self {
            cfg,
            pairs,
            mask,
            mask_t,
            height: h,
            width: w,
        })
    }

    /// Fresh weights with seeded trunks and identity-initialised branches.
    pub fn init_weights(&self, seed: u64) -> AlignWeights {
        let mut rng = crate::synth::stream_rng(seed, 1);
        let mut w = AlignWeights::new(3, &self.cfg.align, &mut rng);
        w.deform_conv = Conv2d::identity(3, 3);
        w
    }

    fn mean(&self, f: impl Fn(&BenchPair) -> Result<f64>) -> Result<f64> {
        let mut s = 0.0;
        for p in &self.pairs {
            s += f(p)?;
        }
        Ok(s / self.pairs.len() as f64)
    }

    pub fn base_epe(&self) -> Result<f64> {
        self.mean(|p| endpoint_error(&p.base, &p.gt, &self.mask))
    }

    /// Base plus residual flow for one pair.
    pub fn refined_flow(&self, p: &BenchPair, heads: &[PredictorWeights]) -> Result<FlowField> {
        let l = heads.len();
        let (pp, pc) = (build_pyramid(&p.prev, l)?, build_pyramid(&p.cur, l)?);
        let delta = crate::align::resflownet(&pp, &pc, &p.base, heads)?;
        p.base.add(&delta)
    }

    pub fn refined_epe(&self, heads: &[PredictorWeights]) -> Result<f64> {
        self.mean(|p| endpoint_error(&self.refined_flow(p, heads)?, &p.gt, &self.mask))
    }

    /// Masked L1 between `h̄` and the current frame.
    pub fn alignment_error(&self, w: &AlignWeights, resflow: bool, deform: bool) -> Result<f64> {
        self.mean(|p| {
            let flow = if resflow { self.refined_flow(p, &w.resflow)? } else { p.base.clone() };
            let aligned = if deform {
                crate::align::deformnet(&p.cur, &p.prev, &p.prev, &flow, &w.deform_head, &w.deform_conv)?
            } else {
                warp(&p.prev, &flow)?
            };
            masked_l1(&aligned, &p.cur, &self.mask_t)
        })
    }

    /// Fits the residual heads' b-branches coarse to fine, splitting the
    /// budget evenly across levels. Returns one result per level, coarsest
    /// first.
    pub fn fit_resflow(&self, heads: &mut [PredictorWeights], fc: &FitConfig) -> Result<Vec<FitResult>> {
        let levels = heads.len();
        let per_level = (fc.budget / levels).max(1);
        let mut results = Vec::new();
        for l in (0..levels).rev() {
            // With finer heads still zero, everything below level `l` only
            // upsamples, so the trunk at `l` is fixed while it is fitted.
            let cache = self
                .pairs
                .iter()
                .map(|p| level_cache(p, heads, l))
                .collect::<Result<Vec<_>>>()?;
            let slots = branch_slots(&heads[l].b_branch, HEAD_WEIGHT_GAIN);
            let x0 = slots.gather(&heads[l].b_branch);
            let template = heads[l].clone();
            let objective = |x: &[f32]| -> f64 {
                let mut w = template.clone();
                slots.scatter(&mut w.b_branch, x);
                let mut total = 0.0;
                for (p, c) in self.pairs.iter().zip(&cache) {
                    let fine = match adastn_head(&c.trunk, &w) {
                        Ok(f) => f,
                        Err(_) => return f64::NAN,
                    };
                    let mut r = c.up.add(&fine).expect("same level");
                    for lv in (0..l).rev() {
                        r = double_flow_to(&r, c.dims[lv].0, c.dims[lv].1).expect("valid flow");
                    }
                    let flow = p.base.add(&r).expect("full resolution");
                    total += endpoint_error(&flow, &p.gt, &self.mask).unwrap_or(f64::NAN);
                }
                total / self.pairs.len() as f64
            };
            let res = spsa(objective, &x0, &FitConfig { budget: per_level, seed: fc.seed + l as u64, ..*fc })?;
            slots.scatter(&mut heads[l].b_branch, &res.params);
            results.push(res);
        }
        Ok(results)
    }

    /// Fits the deformable kernel and the v2 branch biases with the residual
    /// heads held fixed. Branch weights stay zero, so the predicted pattern
    /// is spatially uniform.
    pub fn fit_deform(&self, w: &mut AlignWeights, fc: &FitConfig) -> Result<FitResult> {
        let d = w.deform_conv.weight.dims();
        if d[0] != d[1] || d[2] != 3 || d[3] != 3 {
            return Err(invalid("fit_deform", "the deformable kernel must be square 3×3 over equal channels"));
        }
        let warped = self
            .pairs
            .iter()
            .map(|p| warp(&p.prev, &self.refined_flow(p, &w.resflow)?))
            .collect::<Result<Vec<_>>>()?;
        let (h, wd) = (self.height, self.width);
        let layout = DeformLayout;
        let x0 = layout.gather(&w.deform_head, &w.deform_conv);
        let (head, conv) = (&w.deform_head, &w.deform_conv);
        let objective = |x: &[f32]| -> f64 {
            let (mut hw, mut cw) = (head.clone(), conv.clone());
            layout.scatter(&mut hw, &mut cw, x);
            let params = match uniform_params(&hw, h, wd) {
                Ok(p) => p,
                Err(_) => return f64::NAN,
            };
            let mut total = 0.0;
            for (p, wh) in self.pairs.iter().zip(&warped) {
                let out = deform_sample(wh, &params, &cw.weight, Some(cw.bias.data()))
                    .and_then(|o| masked_l1(&o, &p.cur, &self.mask_t));
                total += out.unwrap_or(f64::NAN);
            }
            total / self.pairs.len() as f64
        };
        let res = spsa(objective, &x0, fc)?;
        let (mut hw, mut cw) = (w.deform_head.clone(), w.deform_conv.clone());
        layout.scatter(&mut hw, &mut cw, &res.params);
        w.deform_head = hw;
        w.deform_conv = cw;
        Ok(res)
    }
}

struct LevelCache {
    trunk: Tensor,
    /// Upsampled residual from coarser levels, at level `l`.
    up: FlowField,
    /// Extents of every level.
    dims: Vec<(usize, usize)>,
}

fn level_cache(p: &BenchPair, heads: &[PredictorWeights], l: usize) -> Result<LevelCache> {
    let levels = heads.len();
    let (pp, pc) = (build_pyramid(&p.prev, levels)?, build_pyramid(&p.cur, levels)?);
    let bases = flow_pyramid(&p.base, levels)?;
    let dims: Vec<(usize, usize)> = pc.iter().map(|t| (t.dims()[1], t.dims()[2])).collect();
    let mut residual: Option<FlowField> = None;
    for lv in (l..levels).rev() {
        let up = match &residual {
            None => FlowField::zeros(dims[lv].0, dims[lv].1),
            Some(r) => double_flow_to(r, dims[lv].0, dims[lv].1)?,
        };
        let warped = warp(&pp[lv], &bases[lv].add(&up)?)?;
        let trunk = heads[lv].trunk_forward(&pc[lv], &warped)?;
        if lv == l {
            return Ok(LevelCache { trunk, up, dims });
        }
        residual = Some(up.add(&adastn_head(&trunk, &heads[lv])?)?);
    }
    unreachable!("level {l} lies inside 0..{levels}")
}

/// Optimiser scale of head weights relative to `1/sqrt(fan_in)`; small, so
/// biases dominate the first moves.
const HEAD_WEIGHT_GAIN: f32 = 0.1;

/// Optimiser coordinates for a conv layer: weights are scaled by
/// `gain/sqrt(fan_in)`, biases are taken as they are.
struct BranchSlots {
    weight_scale: f32,
}

fn branch_slots(conv: &Conv2d, gain: f32) -> BranchSlots {
    let d = conv.weight.dims();
    BranchSlots {
        weight_scale: gain / libm::sqrtf((d[1] * d[2] * d[3]) as f32),
    }
}

impl BranchSlots {
    fn gather(&self, conv: &Conv2d) -> Vec<f32> {
        let mut x: Vec<f32> = conv.weight.data().iter().map(|v| v / self.weight_scale).collect();
        x.extend_from_slice(conv.bias.data());
        x
    }

    fn scatter(&self, conv: &mut Conv2d, x: &[f32]) {
        let nw = conv.weight.len();
        for (d, s) in conv.weight.data_mut().iter_mut().zip(&x[..nw]) {
            *d = s * self.weight_scale;
        }
        conv.bias.data_mut().copy_from_slice(&x[nw..]);
    }
}

const CENTRE_TAP: usize = 4;
/// Optimiser scale of the DC gain and the conv bias, which shift brightness
/// everywhere.
const BRIGHTNESS_GAIN: f32 = 0.02;

/// Deformable fit coordinates. Each channel's own 3×3 kernel is written as a
/// DC gain plus eight off-centre taps whose sum the centre tap cancels, so
/// moving a neighbour tap leaves flat regions unchanged. Cross-channel taps
/// stay fixed. Then come the conv bias and the A, b and mask branch biases.
/// The DC gain and conv bias use [`BRIGHTNESS_GAIN`].
struct DeformLayout;

impl DeformLayout {
    fn diagonal(conv: &Conv2d, c: usize) -> core::ops::Range<usize> {
        let ch = conv.weight.dims()[1];
        let o = (c * ch + c) * 9;
        o..o + 9
    }

    fn gather(&self, head: &PredictorWeights, conv: &Conv2d) -> Vec<f32> {
        let mut x = Vec::new();
        for c in 0..conv.bias.len() {
            let k = &conv.weight.data()[Self::diagonal(conv, c)];
            x.push((k.iter().sum::<f32>() - 1.0) / BRIGHTNESS_GAIN);
            x.extend(k.iter().enumerate().filter(|&(j, _)| j != CENTRE_TAP).map(|(_, &v)| v));
        }
        x.extend(conv.bias.data().iter().map(|v| v / BRIGHTNESS_GAIN));
        for b in branch_biases(head) {
            x.extend_from_slice(b.data());
        }
        x
    }

    fn scatter(&self, head: &mut PredictorWeights, conv: &mut Conv2d, x: &[f32]) {
        let channels = conv.bias.len();
        for c in 0..channels {
            let p = &x[c * 9..c * 9 + 9];
            let r = Self::diagonal(conv, c);
            let k = &mut conv.weight.data_mut()[r];
            let mut rest = 0.0;
            for (j, &t) in p[1..].iter().enumerate() {
                let tap = if j < CENTRE_TAP { j } else { j + 1 };
                k[tap] = t;
                rest += t;
            }
            k[CENTRE_TAP] = 1.0 + p[0] * BRIGHTNESS_GAIN - rest;
        }
        let mut off = channels * 9;
        for (d, s) in conv.bias.data_mut().iter_mut().zip(&x[off..off + channels]) {
            *d = s * BRIGHTNESS_GAIN;
        }
        off += channels;
        for b in branch_biases_mut(head) {
            let len = b.len();
            b.data_mut().copy_from_slice(&x[off..off + len]);
            off += len;
        }
    }
}

fn branch_biases(head: &PredictorWeights) -> Vec<&Tensor> {
    let mut v = vec![];
    if let Some(a) = &head.a_branch {
        v.push(&a.bias);
    }
    v.push(&head.b_branch.bias);
    if let Some(m) = &head.mask_branch {
        v.push(&m.bias);
    }
    v
}

fn branch_biases_mut(head: &mut PredictorWeights) -> Vec<&mut Tensor> {
    let mut v = vec![];
    if let Some(a) = &mut head.a_branch {
        v.push(&mut a.bias);
    }
    v.push(&mut head.b_branch.bias);
    if let Some(m) = &mut head.mask_branch {
        v.push(&mut m.bias);
    }
    v
}

/// Fit settings for [`Bench::fit_deform`]: the masked L1 objective sits near
/// zero, so perturbations and steps are an order smaller than the defaults.
pub fn deform_fit_config(seed: u64) -> FitConfig {
    FitConfig {
        perturbation: 1e-3,
        step: 0.01,
        objective: ObjectiveKind::MaskedL1,
        seed,
        ..FitConfig::default()
    }
}

/// Three-row ablation: base only, plus residual flow, plus both.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ablation {
    pub base: f64,
    pub resflow: f64,
    pub both: f64,
}

pub fn ablation(bench: &Bench, w: &AlignWeights) -> Result<Ablation> {
    Ok(Ablation {
        base: bench.alignment_error(w, false, false)?,
        resflow: bench.alignment_error(w, true, false)?,
        both: bench.alignment_error(w, true, true)?,
    })
}
