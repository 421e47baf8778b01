//! Multi-level alignment: residual flow refinement over a feature pyramid,
//! modulated deformable sampling, and the combined align step used by the
//! recurrent propagation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::adastn::{adastn_predict, adastn_v2_predict, DeformParams, PositionalGrid, PredictorWeights, TAPS};
use crate::conv::{gemm, Conv2d};
use crate::error::{check_dim, invalid, Error, Result};
use crate::flow::{estimate_base_flow, FlowEstimatorConfig};
use crate::sample::{double_flow_to, resize, resize_flow, sample_zero, split, warp, Scale};
use crate::tensor::{FlowField, Tensor};

/// Upper bound on deformable column scratch, in floats.
const COLS_BUDGET: usize = 1 << 18;

/// Level 0 is full resolution; each further level is half the previous one.
pub type FeaturePyramid = Vec<Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignConfig {
    pub levels: usize,
    pub groups: usize,
    pub flow: FlowEstimatorConfig,
    /// Refine the base flow with the residual pyramid.
    pub resflow: bool,
    /// Resample with the deformable head; otherwise a plain flow warp.
    pub deform: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            groups: 4,
            flow: FlowEstimatorConfig::default(),
            resflow: true,
            deform: true,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(invalid("AlignConfig", "levels must be at least 1"));
        }
        if self.groups == 0 {
            return Err(invalid("AlignConfig", "groups must be at least 1"));
        }
        self.flow.validate()
    }
}

/// Weights of one alignment direction.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignWeights {
    /// One residual-flow head per pyramid level, finest first.
    pub resflow: Vec<PredictorWeights>,
    pub deform_head: PredictorWeights,
    /// `(C, C, 3, 3)` weights applied by the deformable sampler.
    pub deform_conv: Conv2d,
}

impl AlignWeights {
    /// Random trunks, identity-initialised branches and a random deformable
    /// kernel.
    pub fn new(channels: usize, cfg: &AlignConfig, rng: &mut impl Rng) -> Self {
        let resflow = (0..cfg.levels).map(|_| PredictorWeights::v1(channels, rng)).collect();
        let deform_head = PredictorWeights::v2(channels, cfg.groups, rng);
        let deform_conv = Conv2d::he_normal(channels, channels, 3, 1, 1.0, rng);
        Self {
            resflow,
            deform_head,
            deform_conv,
        }
    }

    pub fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &'a Tensor)) {
        for (l, w) in self.resflow.iter().enumerate() {
            w.for_each_param(&format!("{prefix}.resflow{l}"), f);
        }
        self.deform_head.for_each_param(&format!("{prefix}.deform_head"), f);
        f(format!("{prefix}.deform_conv.weight"), &self.deform_conv.weight);
        f(format!("{prefix}.deform_conv.bias"), &self.deform_conv.bias);
    }

    pub fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &mut Tensor)) {
        for (l, w) in self.resflow.iter_mut().enumerate() {
            w.for_each_param_mut(&format!("{prefix}.resflow{l}"), f);
        }
        self.deform_head.for_each_param_mut(&format!("{prefix}.deform_head"), f);
        f(format!("{prefix}.deform_conv.weight"), &mut self.deform_conv.weight);
        f(format!("{prefix}.deform_conv.bias"), &mut self.deform_conv.bias);
    }
}

pub fn build_pyramid(f: &Tensor, levels: usize) -> Result<FeaturePyramid> {
    const OP: &str = "build_pyramid";
    let (_, h, w) = f.chw(OP)?;
    if levels == 0 {
        return Err(invalid(OP, "levels must be at least 1"));
    }
    let need = 1usize << (levels - 1);
    if h.min(w) < need {
        return Err(Error::TooSmall {
            op: OP,
            reason: format!("{h}×{w} cannot hold {levels} levels"),
        });
    }
    let mut pyr = vec![f.clone()];
    for _ in 1..levels {
        let next = resize(pyr.last().expect("non-empty"), Scale::Half)?;
        pyr.push(next);
    }
    Ok(pyr)
}

/// Base flow resampled to every pyramid level, finest first.
pub fn flow_pyramid(base: &FlowField, levels: usize) -> Result<Vec<FlowField>> {
    let mut out = vec![base.clone()];
    for _ in 1..levels {
        let next = resize_flow(out.last().expect("non-empty"), Scale::Half)?;
        out.push(next);
    }
    Ok(out)
}

/// Residual flow `ΔΨ` at full resolution, accumulated coarse to fine.
pub fn resflownet(
    pyr_prev: &[Tensor],
    pyr_cur: &[Tensor],
    base_flow: &FlowField,
    weights: &[PredictorWeights],
) -> Result<FlowField> {
    resflownet_with(pyr_prev, pyr_cur, base_flow, weights.len(), |l, cur, warped| {
        adastn_predict(cur, warped, &weights[l])
    })
}

/// [`resflownet`] with the per-level predictor supplied as a closure, so
/// callers can substitute cached or partially evaluated heads.
pub fn resflownet_with(
    pyr_prev: &[Tensor],
    pyr_cur: &[Tensor],
    base_flow: &FlowField,
    levels: usize,
    mut predict: impl FnMut(usize, &Tensor, &Tensor) -> Result<FlowField>,
) -> Result<FlowField> {
    const OP: &str = "resflownet";
    check_dim(OP, "previous pyramid levels", levels, pyr_prev.len())?;
    check_dim(OP, "current pyramid levels", levels, pyr_cur.len())?;
    if levels == 0 {
        return Err(invalid(OP, "at least one level is required"));
    }
    check_dim(OP, "base flow height", pyr_cur[0].dims()[1], base_flow.height())?;
    check_dim(OP, "base flow width", pyr_cur[0].dims()[2], base_flow.width())?;
    let bases = flow_pyramid(base_flow, levels)?;
    let mut residual: Option<FlowField> = None;
    for l in (0..levels).rev() {
        let (lh, lw) = (pyr_cur[l].dims()[1], pyr_cur[l].dims()[2]);
        let up = match &residual {
            None => FlowField::zeros(lh, lw),
            Some(r) => double_flow_to(r, lh, lw)?,
        };
        let coarse = bases[l].add(&up)?;
        let warped = warp(&pyr_prev[l], &coarse)?;
        let fine = predict(l, &pyr_cur[l], &warped)?;
        residual = Some(up.add(&fine)?);
    }
    Ok(residual.expect("at least one level"))
}

/// Modulated deformable convolution:
/// `out(p) = Σ_k w_k · m_k(p) · feature(p + P_k(p))`, zero outside the frame.
///
/// `weight` is `(C', C, 3, 3)`; channel `c` belongs to offset group
/// `c / (C / n)`.
pub fn deform_sample(feature: &Tensor, params: &DeformParams, weight: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    const OP: &str = "deform_sample";
    let (c, h, w) = feature.chw(OP)?;
    params.check(OP, h, w)?;
    let n = params.groups();
    if c % n != 0 {
        return Err(invalid(OP, "feature channels must divide into offset groups"));
    }
    if weight.rank() != 4 {
        return Err(Error::RankMismatch {
            op: OP,
            expected: 4,
            found: weight.rank(),
        });
    }
    let c_out = weight.dims()[0];
    check_dim(OP, "weight input channels", c, weight.dims()[1])?;
    check_dim(OP, "kernel height", 3, weight.dims()[2])?;
    check_dim(OP, "kernel width", 3, weight.dims()[3])?;
    if let Some(b) = bias {
        check_dim(OP, "bias length", c_out, b.len())?;
    }
    let kdim = c * TAPS;
    let hw = h * w;
    let rows = (COLS_BUDGET / (kdim * w)).clamp(1, h);
    let mut cols = vec![0.0f32; kdim * rows * w];
    let mut out = Tensor::zeros(&[c_out, h, w]);
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows).min(h);
        let m = (y1 - y0) * w;
        deform_cols(feature, params, y0, y1, &mut cols[..kdim * m], true);
        gemm(c_out, kdim, m, weight.data(), &cols[..kdim * m], m, &mut out.data_mut()[y0 * w..], hw);
        y0 = y1;
    }
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            if bv != 0.0 {
                out.plane_mut(co).iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Fills the column matrix for output rows `y0..y1`: row `c·9 + kernel index`
/// holds the sampled values of channel `c` at tap `k`, optionally scaled by
/// the mask.
fn deform_cols(feature: &Tensor, params: &DeformParams, y0: usize, y1: usize, cols: &mut [f32], modulate: bool) {
    let (c, h, w) = (feature.dims()[0], feature.dims()[1], feature.dims()[2]);
    let n = params.groups();
    let per_group = c / n;
    let hw = h * w;
    let m = (y1 - y0) * w;
    let (off, masks) = (params.offsets.data(), params.masks.data());
    let mut pos = vec![(0i64, 0.0f32, 0i64, 0.0f32, 0.0f32); m];
    for g in 0..n {
        for k in 0..TAPS {
            let px = &off[((g * 2) * TAPS + k) * hw..][..hw];
            let py = &off[((g * 2 + 1) * TAPS + k) * hw..][..hw];
            let mk = &masks[(g * TAPS + k) * hw..][..hw];
            for (j, p) in pos.iter_mut().enumerate() {
                let i = y0 * w + j;
                let (x, y) = (i % w, i / w);
                let (ox, fx) = split(px[i]);
                let (oy, fy) = split(py[i]);
                *p = (x as i64 + ox, fx, y as i64 + oy, fy, if modulate { mk[i] } else { 1.0 });
            }
            let kidx = PositionalGrid::kernel_index(k);
            for ci in g * per_group..(g + 1) * per_group {
                let plane = feature.plane(ci);
                let row = &mut cols[(ci * TAPS + kidx) * m..][..m];
                for (dst, &(ix, fx, iy, fy, mv)) in row.iter_mut().zip(&pos) {
                    *dst = mv * sample_zero(plane, w, h, ix, fx, iy, fy);
                }
            }
        }
    }
}

/// Gradient of `Σ deform_sample(feature, params, weight)` with respect to
/// every mask entry, shaped like `params.masks`.
pub fn deform_mask_grad(feature: &Tensor, params: &DeformParams, weight: &Tensor) -> Result<Tensor> {
    const OP: &str = "deform_mask_grad";
    let (c, h, w) = feature.chw(OP)?;
    params.check(OP, h, w)?;
    check_dim(OP, "weight input channels", c, weight.dims()[1])?;
    let n = params.groups();
    let per_group = c / n;
    let hw = h * w;
    // Column sums of the weight: Σ_{c'} w[c', c, kidx].
    let kdim = c * TAPS;
    let mut wsum = vec![0.0f64; kdim];
    for row in weight.data().chunks(kdim) {
        for (s, &v) in wsum.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    let mut cols = vec![0.0f32; kdim * hw];
    deform_cols(feature, params, 0, h, &mut cols, false);
    let mut grad = Tensor::zeros(params.masks.dims());
    for g in 0..n {
        for k in 0..TAPS {
            let kidx = PositionalGrid::kernel_index(k);
            let dst = &mut grad.data_mut()[(g * TAPS + k) * hw..][..hw];
            for (p, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for ci in g * per_group..(g + 1) * per_group {
                    acc += wsum[ci * TAPS + kidx] * cols[(ci * TAPS + kidx) * hw + p] as f64;
                }
                *d = acc as f32;
            }
        }
    }
    Ok(grad)
}

/// Warps the previous features and hidden state with `flow`, predicts the
/// deformable pattern from the feature pair and resamples the hidden state.
pub fn deformnet(
    f_cur: &Tensor,
    f_prev: &Tensor,
    h_prev: &Tensor,
    flow: &FlowField,
    head: &PredictorWeights,
    conv: &Conv2d,
) -> Result<Tensor> {
    let wf = warp(f_prev, flow)?;
    let wh = warp(h_prev, flow)?;
    let params = adastn_v2_predict(f_cur, &wf, head, head.groups)?;
    deform_sample(&wh, &params, &conv.weight, Some(conv.bias.data()))
}

/// Result of one alignment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Aligned {
    pub feature: Tensor,
    pub base_flow: FlowField,
    /// Base plus residual flow.
    pub flow: FlowField,
    pub low_texture: bool,
}

/// Aligns `h_prev` to the current frame.
pub fn align(
    x_prev: &Tensor,
    x_cur: &Tensor,
    f_prev: &Tensor,
    f_cur: &Tensor,
    h_prev: &Tensor,
    cfg: &AlignConfig,
    weights: &AlignWeights,
) -> Result<Aligned> {
    const OP: &str = "align";
    cfg.validate()?;
    let (_, h, w) = x_cur.chw(OP)?;
    let est = estimate_base_flow(x_cur, x_prev, &cfg.flow.fitted_to(h, w))?;
    let flow = if cfg.resflow {
        check_dim(OP, "resflow heads", cfg.levels, weights.resflow.len())?;
        let pp = build_pyramid(f_prev, cfg.levels)?;
        let pc = build_pyramid(f_cur, cfg.levels)?;
        let delta = resflownet(&pp, &pc, &est.flow, &weights.resflow)?;
        est.flow.add(&delta)?
    } else {
        est.flow.clone()
    };
    let feature = if cfg.deform {
        deformnet(f_cur, f_prev, h_prev, &flow, &weights.deform_head, &weights.deform_conv)?
    } else {
        warp(h_prev, &flow)?
    };
    Ok(Aligned {
        feature,
        base_flow: est.flow,
        flow,
        low_texture: est.low_texture,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adastn::MASK_BIAS;
    use crate::conv::{conv2d, sigmoid};
    use crate::synth::stream_rng;
    use rand::Rng;

    fn noise(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, 0);
        let data = (0..c * h * w).map(|_| rng.random::<f32>()).collect();
        Tensor::new(&[c, h, w], data).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let f = noise(2, 32, 32, 1);
        assert_eq!(build_pyramid(&f, 1).unwrap(), vec![f.clone()]);
        let p = build_pyramid(&f, 3).unwrap();
        let sizes: Vec<usize> = p.iter().map(|t| t.dims()[1]).collect();
        assert_eq!(sizes, [32, 16, 8]);
        let c = Tensor::full(&[1, 8, 8], 0.3);
        assert!(build_pyramid(&c, 3).unwrap().iter().all(|t| t.data().iter().all(|&v| v == 0.3)));
        assert!(matches!(build_pyramid(&noise(1, 3, 8, 0), 3), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn plain_pattern_matches_conv() {
        let f = noise(4, 7, 9, 2);
        let wt = noise(3, 4, 9, 3).reshape(&[3, 4, 3, 3]).unwrap();
        let params = DeformParams::plain(2, 7, 9, 1.0);
        let a = deform_sample(&f, &params, &wt, None).unwrap();
        let b = conv2d(&f, &wt, None, 1).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
    }

    #[test]
    fn zero_mask_gives_zero() {
        let f = noise(2, 5, 5, 2);
        let wt = noise(2, 2, 9, 3).reshape(&[2, 2, 3, 3]).unwrap();
        let params = DeformParams::plain(1, 5, 5, 0.0);
        assert!(deform_sample(&f, &params, &wt, None).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_heads_leave_base_flow() {
        let mut rng = stream_rng(9, 0);
        let w: Vec<PredictorWeights> = (0..3).map(|_| PredictorWeights::v1(2, &mut rng)).collect();
        let (a, b) = (noise(2, 20, 20, 4), noise(2, 20, 20, 5));
        let base = FlowField::from_fn(20, 20, |x, y| (x as f32 * 0.1 - 0.3, y as f32 * -0.05));
        let d = resflownet(&build_pyramid(&a, 3).unwrap(), &build_pyramid(&b, 3).unwrap(), &base, &w).unwrap();
        assert!(d.as_tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(base.add(&d).unwrap(), base);
    }

    #[test]
    fn init_deformnet_is_masked_warp_conv() {
        let mut rng = stream_rng(11, 0);
        let cfg = AlignConfig::default();
        let wts = AlignWeights::new(4, &cfg, &mut rng);
        let (fc, fp, hp) = (noise(4, 16, 16, 1), noise(4, 16, 16, 2), noise(4, 16, 16, 3));
        let flow = FlowField::from_fn(16, 16, |x, y| (0.3 + x as f32 * 0.02, -0.7 + y as f32 * 0.01));
        let out = deformnet(&fc, &fp, &hp, &flow, &wts.deform_head, &wts.deform_conv).unwrap();
        let m = sigmoid(MASK_BIAS);
        let reference = conv2d(
            &warp(&hp, &flow).unwrap().map(|v| m * v),
            &wts.deform_conv.weight,
            Some(wts.deform_conv.bias.data()),
            1,
        )
        .unwrap();
        assert_eq!(out, reference);
    }
}
