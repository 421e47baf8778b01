//! Central-difference gradients, the reference for analytic derivative checks.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::adastn::{DeformParams, TAPS};
use crate::align::{deform_mask_grad, deform_sample};
use crate::error::{invalid, Error, Result};
use crate::sample::{warp, warp_flow_grad};
use crate::synth::stream_rng;
use crate::tensor::{FlowField, Tensor};

/// Probe step of the built-in checks. Both checked sums are piecewise
/// multilinear, so the step only has to stay inside one cell.
pub const CHECK_EPS: f32 = 5e-2;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-2;

/// Central-difference gradient of a scalar function of `input`.
///
/// Each element is perturbed by `±eps` in `f32`; the difference is divided by
/// the realised step `(x + eps) - (x - eps)` so representation error in the
/// perturbed coordinate does not leak into the estimate.
pub fn finite_diff_gradient(op: impl Fn(&Tensor) -> f64, input: &Tensor, eps: f32) -> Result<Tensor> {
    finite_diff_at(&op, input, eps, 0..input.len())
}

/// Like [`finite_diff_gradient`] but only evaluates the listed element indices;
/// every other entry of the returned gradient is zero.
pub fn finite_diff_at(
    op: &impl Fn(&Tensor) -> f64,
    input: &Tensor,
    eps: f32,
    indices: impl IntoIterator<Item = usize>,
) -> Result<Tensor> {
    const OP: &str = "finite_diff_gradient";
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid(OP, "eps must be positive"));
    }
    let mut grad = Tensor::zeros(input.dims());
    let mut probe = input.clone();
    for i in indices {
        let x = input.data()[i];
        let (xp, xm) = (x + eps, x - eps);
        probe.data_mut()[i] = xp;
        let fp = op(&probe);
        probe.data_mut()[i] = xm;
        let fm = op(&probe);
        probe.data_mut()[i] = x;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { op: OP });
        }
        grad.data_mut()[i] = ((fp - fm) / (xp as f64 - xm as f64)) as f32;
    }
    Ok(grad)
}

/// Sum of all elements accumulated in `f64`.
pub fn sum_f64(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| v as f64).sum()
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub points: usize,
    /// `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

fn compare(name: &'static str, analytic: &Tensor, numeric: &Tensor, idx: &[usize]) -> GradCheck {
    let errs: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let (a, n) = (analytic.data()[i] as f64, numeric.data()[i] as f64);
            (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
        })
        .collect();
    GradCheck {
        name,
        points: idx.len(),
        max_rel_err: errs.iter().copied().fold(0.0, f64::max),
        mean_rel_err: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
    }
}

fn random_tensor(dims: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random::<f32>()).collect()).expect("extents match")
}

/// Fraction in `[0.1, 0.9]`, so a `CHECK_EPS` probe never crosses a cell edge.
fn cell_fraction(rng: &mut impl Rng) -> f32 {
    rng.random_range(0.1..0.9)
}

/// `warp_flow_grad` on a random `(3, 16, 16)` feature at `points` random flow
/// components. Every sample position lands strictly inside the frame.
pub fn check_warp_flow_grad(points: usize, seed: u64) -> Result<GradCheck> {
    let (h, w) = (16, 16);
    let mut rng = stream_rng(seed, 40);
    let feature = random_tensor(&[3, h, w], &mut rng);
    let flow = FlowField::from_fn(h, w, |x, y| {
        let tx = rng.random_range(0..w - 1) as f32 + cell_fraction(&mut rng);
        let ty = rng.random_range(0..h - 1) as f32 + cell_fraction(&mut rng);
        (tx - x as f32, ty - y as f32)
    });
    let analytic = warp_flow_grad(&feature, &flow)?;
    let idx = sample(&mut rng, 2 * h * w, points.min(2 * h * w)).into_vec();
    let op = |f: &Tensor| match FlowField::new(f.clone()).and_then(|f| warp(&feature, &f)) {
        Ok(out) => sum_f64(&out),
        Err(_) => f64::NAN,
    };
    let numeric = finite_diff_at(&op, flow.as_tensor(), CHECK_EPS, idx.iter().copied())?;
    Ok(compare("warp_flow_grad", &analytic, &numeric, &idx))
}

/// `deform_mask_grad` on a random `(4, 12, 12)` feature with two groups,
/// jittered offsets and masks in `[0.1, 0.9]`.
pub fn check_deform_mask_grad(points: usize, seed: u64) -> Result<GradCheck> {
    let (c, h, w, n) = (4, 12, 12, 2);
    let mut rng = stream_rng(seed, 41);
    let feature = random_tensor(&[c, h, w], &mut rng);
    let weight = random_tensor(&[c, c, 3, 3], &mut rng).map(|v| v - 0.5);
    let mut params = DeformParams::plain(n, h, w, 0.5);
    for v in params.offsets.data_mut() {
        *v += rng.random_range(-1.5..1.5);
    }
    for v in params.masks.data_mut() {
        *v = cell_fraction(&mut rng);
    }
    let analytic = deform_mask_grad(&feature, &params, &weight)?;
    let total = n * TAPS * h * w;
    let idx = sample(&mut rng, total, points.min(total)).into_vec();
    let op = |m: &Tensor| {
        let p = DeformParams {
            offsets: params.offsets.clone(),
            masks: m.clone(),
        };
        deform_sample(&feature, &p, &weight, None).map_or(f64::NAN, |out| sum_f64(&out))
    };
    let numeric = finite_diff_at(&op, &params.masks, CHECK_EPS, idx.iter().copied())?;
    Ok(compare("deform_mask_grad", &analytic, &numeric, &idx))
}
