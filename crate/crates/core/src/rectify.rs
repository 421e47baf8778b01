//! Rectification of a misaligned high-resolution target: guided-filter colour
//! transfer, flow-based position alignment, the out-of-bounds mask and the
//! masked L1 objective.

use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Result};
use crate::filter::box_mean;
use crate::flow::{estimate_base_flow, FlowEstimatorConfig};
use crate::sample::{box_downsample, upsample_bilinear, upsample_flow, warp};
use crate::tensor::{FlowField, Tensor};

pub const GUIDED_RADIUS: usize = 8;
pub const GUIDED_EPS: f64 = 1e-4;

/// Channel-wise guided filter: `q = mean(a)·I + mean(b)` with
/// `a = cov(I, p) / (var(I) + eps)` and `b = mean(p) − a·mean(I)` over
/// `(2r+1)²` windows.
pub fn guided_filter(guide: &Tensor, src: &Tensor, radius: usize, eps: f64) -> Result<Tensor> {
    let (ma, mb) = guided_coefficients(guide, src, radius, eps)?;
    apply_coefficients(guide, &ma, &mb)
}

/// Window-averaged linear coefficients `(mean(a), mean(b))` of the guided
/// filter, each shaped like `guide`.
pub fn guided_coefficients(guide: &Tensor, src: &Tensor, radius: usize, eps: f64) -> Result<(Tensor, Tensor)> {
    const OP: &str = "guided_filter";
    guide.check_same_dims(OP, src)?;
    let (c, h, w) = guide.chw(OP)?;
    if radius == 0 {
        return Err(invalid(OP, "radius must be at least 1"));
    }
    if !(eps > 0.0) {
        return Err(invalid(OP, "eps must be positive"));
    }
    let mut out_a = Tensor::zeros(&[c, h, w]);
    let mut out_b = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let i: Vec<f64> = guide.plane(ci).iter().map(|&v| v as f64).collect();
        let p: Vec<f64> = src.plane(ci).iter().map(|&v| v as f64).collect();
        let ip: Vec<f64> = i.iter().zip(&p).map(|(a, b)| a * b).collect();
        let ii: Vec<f64> = i.iter().map(|a| a * a).collect();
        let (mi, mp) = (box_mean(&i, w, h, radius), box_mean(&p, w, h, radius));
        let (mip, mii) = (box_mean(&ip, w, h, radius), box_mean(&ii, w, h, radius));
        let mut a = Vec::with_capacity(h * w);
        let mut b = Vec::with_capacity(h * w);
        for k in 0..h * w {
            let var = mii[k] - mi[k] * mi[k];
            let cov = mip[k] - mi[k] * mp[k];
            let ak = cov / (var + eps);
            a.push(ak);
            b.push(mp[k] - ak * mi[k]);
        }
        let (ma, mb) = (box_mean(&a, w, h, radius), box_mean(&b, w, h, radius));
        for (o, v) in out_a.plane_mut(ci).iter_mut().zip(&ma) {
            *o = *v as f32;
        }
        for (o, v) in out_b.plane_mut(ci).iter_mut().zip(&mb) {
            *o = *v as f32;
        }
    }
    Ok((out_a, out_b))
}

fn apply_coefficients(guide: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ag = guide.zip_map(a, |g, a| (a as f64 * g as f64) as f32)?;
    ag.zip_map(b, |x, y| (x as f64 + y as f64) as f32)
}

fn check_scale(op: &'static str, x: &Tensor, y: &Tensor, r: usize) -> Result<()> {
    let (cx, hx, wx) = x.chw(op)?;
    let (cy, hy, wy) = y.chw(op)?;
    check_dim(op, "channels", cx, cy)?;
    check_dim(op, "height", hx * r, hy)?;
    check_dim(op, "width", wx * r, wy)
}

/// Moves the colour of `y` onto that of `x` while keeping the texture and
/// geometry of `y`. The colour difference `x − y↓` is guided-filtered at low
/// resolution with `y↓` as the guide; its linear coefficients are upsampled
/// and the modelled difference is added to `y`. A colour-matched pair is left
/// unchanged.
pub fn color_correct(x: &Tensor, y: &Tensor, r: usize) -> Result<Tensor> {
    check_scale("color_correct", x, y, r)?;
    let radius = (GUIDED_RADIUS / r).max(1);
    let y_lr = box_downsample(y, r)?;
    let diff = x.sub(&y_lr)?;
    let (a, b) = guided_coefficients(&y_lr, &diff, radius, GUIDED_EPS)?;
    let (a, b) = (upsample_bilinear(&a, r)?, upsample_bilinear(&b, r)?);
    let modelled = apply_coefficients(y, &a, &b)?;
    y.add(&modelled)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RectifiedTarget {
    pub y_w: Tensor,
    /// `(1, rH, rW)`, 1 where the upsampled flow stays inside the frame.
    pub mask: Tensor,
    /// Low-resolution flow `O`.
    pub flow: FlowField,
    pub low_texture: bool,
}

/// `(1, H, W)` mask, 1 where `p + flow(p)` lies inside the frame's pixel
/// footprint `[-0.5, extent - 0.5]`.
pub fn in_bounds_mask(flow: &FlowField) -> Tensor {
    let (h, w) = (flow.height(), flow.width());
    let (dx, dy) = (flow.dx(), flow.dy());
    let data = (0..h * w)
        .map(|i| {
            let x = (i % w) as f32 + dx[i];
            let y = (i / w) as f32 + dy[i];
            let inside = x >= -0.5 && y >= -0.5 && x <= w as f32 - 0.5 && y <= h as f32 - 0.5;
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&[1, h, w], data).expect("extents match")
}

/// Flow from `x` to the decimated `y`, used to warp `y` onto `x`.
pub fn position_flow(x: &Tensor, y: &Tensor, r: usize, cfg: &FlowEstimatorConfig) -> Result<(FlowField, bool)> {
    check_scale("position_flow", x, y, r)?;
    let (_, h, w) = x.chw("position_flow")?;
    let est = estimate_base_flow(x, &box_downsample(y, r)?, &cfg.fitted_to(h, w))?;
    Ok((est.flow, est.low_texture))
}

/// Warps `y` with an LR flow upsampled to its resolution; returns the warped
/// image and the out-of-bounds mask.
pub fn align_to_flow(y: &Tensor, flow: &FlowField, r: usize) -> Result<(Tensor, Tensor)> {
    let up = upsample_flow(flow, r)?;
    Ok((warp(y, &up)?, in_bounds_mask(&up)))
}

pub fn rectify_target(x: &Tensor, y: &Tensor, r: usize, cfg: &FlowEstimatorConfig) -> Result<RectifiedTarget> {
    let y_g = color_correct(x, y, r)?;
    let (flow, low_texture) = position_flow(x, &y_g, r, cfg)?;
    let (y_w, mask) = align_to_flow(&y_g, &flow, r)?;
    Ok(RectifiedTarget {
        y_w,
        mask,
        flow,
        low_texture,
    })
}

/// `mean(|m ∘ (pred − target)|)` over every element; `m` is `(1, H, W)` or
/// matches `pred`.
pub fn masked_l1(pred: &Tensor, target: &Tensor, m: &Tensor) -> Result<f64> {
    const OP: &str = "masked_l1";
    pred.check_same_dims(OP, target)?;
    let (c, h, w) = pred.chw(OP)?;
    let (mc, mh, mw) = m.chw(OP)?;
    check_dim(OP, "mask height", h, mh)?;
    check_dim(OP, "mask width", w, mw)?;
    if mc != 1 && mc != c {
        return Err(invalid(OP, "mask must have one channel or match the prediction"));
    }
    let hw = h * w;
    let mut acc = 0.0f64;
    for ci in 0..c {
        let mp = m.plane(if mc == 1 { 0 } else { ci });
        for ((&p, &t), &mv) in pred.plane(ci).iter().zip(target.plane(ci)).zip(mp) {
            acc += (mv as f64 * (p as f64 - t as f64)).abs();
        }
    }
    Ok(acc / (c * hw) as f64)
}
