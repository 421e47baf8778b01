//! Base optical flow: pyramidal Lucas–Kanade, an exhaustive block-matching
//! oracle and the endpoint-error metric.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Error, Result};
use crate::filter::{box_mean, central_gradients, gaussian_kernel};
use crate::sample::{double_flow_to, resize, warp, Scale};
use crate::tensor::{FlowField, Tensor};

/// Smallest structure-tensor eigenvalue for which a pixel is updated.
const MIN_EIGEN: f64 = 1e-6;
/// Pre-smoothing applied to every pyramid level.
const SMOOTH_SIGMA: f64 = 1.0;
/// Largest per-iteration update, in pixels of the current level.
const MAX_STEP: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowEstimatorConfig {
    pub levels: usize,
    pub iters_per_level: usize,
    /// Odd side length of the local least-squares window.
    pub window: usize,
}

impl Default for FlowEstimatorConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iters_per_level: 10,
            window: 7,
        }
    }
}

impl FlowEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(invalid("FlowEstimatorConfig", "levels must be at least 1"));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(invalid("FlowEstimatorConfig", "window must be odd and at least 3"));
        }
        Ok(())
    }

    /// Smallest extent the configuration accepts.
    pub fn min_extent(&self) -> usize {
        (1 << (self.levels - 1)) * self.window
    }

    /// The same configuration with as many levels as an `h × w` input allows
    /// (never fewer than one).
    pub fn fitted_to(mut self, h: usize, w: usize) -> Self {
        while self.levels > 1 && self.min_extent() > h.min(w) {
            self.levels -= 1;
        }
        self
    }
}

/// A flow estimate plus the low-texture warning.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowEstimate {
    pub flow: FlowField,
    /// Set when an input is constant or most pixels had a singular local system.
    pub low_texture: bool,
}

/// Single-channel intensity: Rec. 601 luma for RGB, the channel mean otherwise.
pub fn luma(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw("luma")?;
    match c {
        1 => Ok(t.clone()),
        3 => {
            let (r, g, b) = (t.plane(0), t.plane(1), t.plane(2));
            let data = (0..h * w)
                .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
                .collect();
            Tensor::new(&[1, h, w], data)
        }
        _ => {
            let data = (0..h * w)
                .map(|i| (0..c).map(|ci| t.plane(ci)[i]).sum::<f32>() / c as f32)
                .collect();
            Tensor::new(&[1, h, w], data)
        }
    }
}

/// Flow `Ψ` from `a` to `b` such that `warp(b, Ψ) ≈ a`, by coarse-to-fine
/// Lucas–Kanade.
pub fn estimate_base_flow(a: &Tensor, b: &Tensor, cfg: &FlowEstimatorConfig) -> Result<FlowEstimate> {
    const OP: &str = "estimate_base_flow";
    cfg.validate()?;
    a.check_same_dims(OP, b)?;
    let (_, h, w) = a.chw(OP)?;
    if h.min(w) < cfg.min_extent() {
        return Err(Error::TooSmall {
            op: OP,
            reason: format!("{h}×{w} is below {} for {} levels", cfg.min_extent(), cfg.levels),
        });
    }
    let (ga, gb) = (luma(a)?, luma(b)?);
    if is_flat(&ga) || is_flat(&gb) {
        return Ok(FlowEstimate {
            flow: FlowField::zeros(h, w),
            low_texture: true,
        });
    }

    // Each level is pre-smoothed so halving does not alias texture into
    // spurious coarse motion.
    let mut pyr_a = vec![smooth(&ga)];
    let mut pyr_b = vec![smooth(&gb)];
    for _ in 1..cfg.levels {
        let na = smooth(&resize(pyr_a.last().expect("non-empty"), Scale::Half)?);
        let nb = smooth(&resize(pyr_b.last().expect("non-empty"), Scale::Half)?);
        pyr_a.push(na);
        pyr_b.push(nb);
    }

    let mut flow: Option<FlowField> = None;
    let mut singular_fraction = 0.0;
    for level in (0..cfg.levels).rev() {
        let (la, lb) = (&pyr_a[level], &pyr_b[level]);
        let (lh, lw) = (la.dims()[1], la.dims()[2]);
        let mut f = match flow {
            None => FlowField::zeros(lh, lw),
            Some(prev) => double_flow_to(&prev, lh, lw)?,
        };
        singular_fraction = lk_refine(la, lb, &mut f, cfg)?;
        flow = Some(f);
    }
    Ok(FlowEstimate {
        flow: flow.expect("at least one level"),
        low_texture: singular_fraction > 0.5,
    })
}

fn smooth(t: &Tensor) -> Tensor {
    let taps = gaussian_kernel(5, SMOOTH_SIGMA);
    let (h, w) = (t.dims()[1], t.dims()[2]);
    let src: Vec<f64> = t.plane(0).iter().map(|&v| v as f64).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5)
                .map(|i| taps[i] * src[y * w + clamp(x as isize + i as isize - 2, w)])
                .sum();
        }
    }
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            (0..5)
                .map(|k| taps[k] * tmp[clamp(y as isize + k as isize - 2, h) * w + x])
                .sum::<f64>() as f32
        })
        .collect();
    Tensor::new(&[1, h, w], data).expect("same extents")
}

fn is_flat(t: &Tensor) -> bool {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo < 1e-6
}

/// Runs the per-level Gauss–Newton iterations in place; returns the fraction
/// of pixels whose local system was singular on the last iteration.
fn lk_refine(a: &Tensor, b: &Tensor, flow: &mut FlowField, cfg: &FlowEstimatorConfig) -> Result<f64> {
    let (h, w) = (a.dims()[1], a.dims()[2]);
    let n = h * w;
    let r = cfg.window / 2;
    let (gax, gay) = central_gradients(a.plane(0), w, h);
    // Gradients of `b` are taken before warping; differentiating the warped
    // image would fold the flow's own spatial noise back into the update.
    let (gbx0, gby0) = central_gradients(b.plane(0), w, h);
    let gb = Tensor::new(&[3, h, w], [b.data(), &gbx0[..], &gby0[..]].concat())?;
    let mut singular = 0usize;
    // Every pixel solves for one flow shared by its whole window. Residuals
    // of neighbours are re-linearised around that shared flow, which keeps
    // the iteration from amplifying pixel-to-pixel noise in the field.
    let mut acc = vec![vec![0.0f64; n]; 5];
    for _ in 0..cfg.iters_per_level {
        let warped = warp(&gb, flow)?;
        let (bw, gbx, gby) = (warped.plane(0), warped.plane(1), warped.plane(2));
        let (fx, fy) = (flow.dx(), flow.dy());
        for i in 0..n {
            // Samples that left `b` only see the clamped border; drop them.
            let (px, py) = ((i % w) as f32 + fx[i], (i / w) as f32 + fy[i]);
            if !(px >= 0.0 && px <= (w - 1) as f32 && py >= 0.0 && py <= (h - 1) as f32) {
                acc.iter_mut().for_each(|c| c[i] = 0.0);
                continue;
            }
            let ix = 0.5 * (gax[i] + gbx[i]) as f64;
            let iy = 0.5 * (gay[i] + gby[i]) as f64;
            let it = (bw[i] - a.data()[i]) as f64;
            let (u, v) = (fx[i] as f64, fy[i] as f64);
            let (xx, xy, yy) = (ix * ix, ix * iy, iy * iy);
            acc[0][i] = xx;
            acc[1][i] = xy;
            acc[2][i] = yy;
            // Right-hand side: Σ g gᵀ f_j − Σ g it.
            acc[3][i] = xx * u + xy * v - ix * it;
            acc[4][i] = xy * u + yy * v - iy * it;
        }
        let s: Vec<Vec<f64>> = acc[..5].iter().map(|c| box_mean(c, w, h, r)).collect();
        let (sxx, sxy, syy, bx, by) = (&s[0], &s[1], &s[2], &s[3], &s[4]);
        singular = 0;
        let t = flow.tensor_mut().data_mut();
        for i in 0..n {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            let disc = libm::sqrt((tr * tr - 4.0 * det).max(0.0));
            let min_eig = 0.5 * (tr - disc);
            if min_eig < MIN_EIGEN {
                singular += 1;
                continue;
            }
            let nx = (syy[i] * bx[i] - sxy[i] * by[i]) / det;
            let ny = (sxx[i] * by[i] - sxy[i] * bx[i]) / det;
            let (u, v) = (t[i] as f64, t[n + i] as f64);
            t[i] = (u + (nx - u).clamp(-MAX_STEP, MAX_STEP)) as f32;
            t[n + i] = (v + (ny - v).clamp(-MAX_STEP, MAX_STEP)) as f32;
        }
    }
    Ok(singular as f64 / n as f64)
}

/// Half-width of the block-matching patch (7 × 7 patches).
const PATCH_RADIUS: isize = 3;

/// Integer flow from an exhaustive SAD search over `(2·radius + 1)²`
/// displacements per pixel. Ties go to the smallest displacement, then to the
/// lexicographically smallest `(dy, dx)`.
pub fn block_match_flow(a: &Tensor, b: &Tensor, radius: usize) -> Result<FlowField> {
    const OP: &str = "block_match_flow";
    if radius == 0 {
        return Err(invalid(OP, "radius must be at least 1"));
    }
    a.check_same_dims(OP, b)?;
    let (ga, gb) = (luma(a)?, luma(b)?);
    let (_, h, w) = ga.chw(OP)?;
    let (pa, pb) = (ga.plane(0), gb.plane(0));
    let r = radius as isize;
    let mut candidates: Vec<(isize, isize)> = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            candidates.push((dx, dy));
        }
    }
    candidates.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    let at = |p: &[f32], x: isize, y: isize| -> f32 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        p[yc * w + xc]
    };
    Ok(FlowField::from_fn(h, w, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let mut best = (f32::INFINITY, 0isize, 0isize);
        for &(dx, dy) in &candidates {
            let mut sad = 0.0f32;
            for oy in -PATCH_RADIUS..=PATCH_RADIUS {
                for ox in -PATCH_RADIUS..=PATCH_RADIUS {
                    sad += (at(pa, x + ox, y + oy) - at(pb, x + ox + dx, y + oy + dy)).abs();
                }
            }
            if sad < best.0 {
                best = (sad, dx, dy);
            }
        }
        (best.1 as f32, best.2 as f32)
    }))
}

/// Mean Euclidean distance between two flows over the pixels where `valid` is
/// set.
pub fn endpoint_error(est: &FlowField, gt: &FlowField, valid: &[bool]) -> Result<f64> {
    const OP: &str = "endpoint_error";
    check_dim(OP, "height", gt.height(), est.height())?;
    check_dim(OP, "width", gt.width(), est.width())?;
    check_dim(OP, "mask length", est.height() * est.width(), valid.len())?;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (i, &ok) in valid.iter().enumerate() {
        if ok {
            let ex = (est.dx()[i] - gt.dx()[i]) as f64;
            let ey = (est.dy()[i] - gt.dy()[i]) as f64;
            sum += libm::sqrt(ex * ex + ey * ey);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask { op: OP });
    }
    Ok(sum / count as f64)
}

/// Mask selecting pixels at least `margin` away from every border.
pub fn interior_mask(h: usize, w: usize, margin: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for y in margin..h.saturating_sub(margin) {
        for x in margin..w.saturating_sub(margin) {
            m[y * w + x] = true;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[1, h, w], (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = noise(32, 32, 1);
        let est = estimate_base_flow(&a, &a, &FlowEstimatorConfig::default()).unwrap();
        assert_eq!(est.flow, FlowField::zeros(32, 32));
        assert!(!est.low_texture);
    }

    #[test]
    fn constant_frames_flag_low_texture() {
        let a = Tensor::full(&[3, 32, 32], 0.4);
        let est = estimate_base_flow(&a, &a, &FlowEstimatorConfig::default()).unwrap();
        assert!(est.low_texture);
        assert_eq!(est.flow, FlowField::zeros(32, 32));
    }

    #[test]
    fn too_small_input_is_rejected() {
        let a = noise(20, 20, 2);
        assert!(matches!(
            estimate_base_flow(&a, &a, &FlowEstimatorConfig::default()),
            Err(Error::TooSmall { .. })
        ));
        let fitted = FlowEstimatorConfig::default().fitted_to(20, 20);
        assert_eq!(fitted.levels, 2);
        assert!(estimate_base_flow(&a, &a, &fitted).is_ok());
    }

    #[test]
    fn config_validation() {
        let bad = FlowEstimatorConfig {
            window: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = FlowEstimatorConfig {
            levels: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn block_match_identical_and_constant() {
        let a = noise(12, 12, 3);
        assert_eq!(block_match_flow(&a, &a, 2).unwrap(), FlowField::zeros(12, 12));
        let c = Tensor::full(&[1, 12, 12], 0.2);
        assert_eq!(block_match_flow(&c, &c, 3).unwrap(), FlowField::zeros(12, 12));
    }

    #[test]
    fn block_match_finds_integer_translation() {
        let (h, w) = (24, 24);
        let a = noise(h, w, 4);
        // b(p + (2, -1)) = a(p)
        let b = Tensor::from_fn_chw(1, h, w, |_, y, x| {
            let sx = (x as isize - 2).clamp(0, w as isize - 1) as usize;
            let sy = (y as isize + 1).clamp(0, h as isize - 1) as usize;
            a.data()[sy * w + sx]
        });
        let f = block_match_flow(&a, &b, 2).unwrap();
        let margin = 3 + 2 + 2;
        for y in margin..h - margin {
            for x in margin..w - margin {
                assert_eq!(f.at(x, y), (2.0, -1.0), "at ({x}, {y})");
            }
        }
    }

    #[test]
    fn epe_hand_values() {
        let gt = FlowField::uniform(2, 2, 0.5, -1.0);
        let all = vec![true; 4];
        assert_eq!(endpoint_error(&gt, &gt, &all).unwrap(), 0.0);
        let off = gt.add(&FlowField::uniform(2, 2, 1.0, 0.0)).unwrap();
        assert!((endpoint_error(&off, &gt, &all).unwrap() - 1.0).abs() < 1e-12);
        let zero = FlowField::zeros(2, 2);
        let half = FlowField::from_fn(2, 2, |x, _| if x == 0 { (3.0, 4.0) } else { (0.0, 0.0) });
        assert_eq!(endpoint_error(&half, &zero, &all).unwrap(), 2.5);
        assert!(matches!(
            endpoint_error(&gt, &gt, &[false; 4]),
            Err(Error::EmptyMask { .. })
        ));
    }
}
