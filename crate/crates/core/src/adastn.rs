//! Per-pixel affine predictors: AdaSTN (residual flow) and AdaSTN v2
//! (deformable sampling pattern plus modulation masks).

use alloc::vec::Vec;

use rand::Rng;

use crate::conv::{relu_inplace, sigmoid, Conv2d};
use crate::error::{check_dim, invalid, Error, Result};
use crate::tensor::{FlowField, Tensor};

/// Width of the shared trunk of every predictor head.
pub const HIDDEN: usize = 64;
/// Mask-branch bias at initialisation; `sigmoid(7) ≈ 0.999`.
pub const MASK_BIAS: f32 = 7.0;
/// Taps of a 3 × 3 kernel.
pub const TAPS: usize = 9;

/// The constant 2 × 9 positional grid. Row 0 holds the horizontal offsets,
/// row 1 the vertical ones; column `k` is tap `k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionalGrid;

impl PositionalGrid {
    pub const ROWS: [[f32; TAPS]; 2] = [
        [-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        [-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, -1.0, 0.0, 1.0],
    ];

    /// `(dx, dy)` of tap `k`.
    pub fn tap(k: usize) -> (f32, f32) {
        (Self::ROWS[0][k], Self::ROWS[1][k])
    }

    /// Row-major index of tap `k` inside a 3 × 3 kernel.
    pub fn kernel_index(k: usize) -> usize {
        (k % 3) * 3 + k / 3
    }
}

/// Per-pixel, per-group affine transform `(A, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineField {
    /// `(n, 2, 2, H, W)`.
    pub a: Tensor,
    /// `(n, 2, 1, H, W)`.
    pub b: Tensor,
}

impl AffineField {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        const OP: &str = "AffineField::new";
        if a.rank() != 5 || b.rank() != 5 {
            return Err(Error::RankMismatch {
                op: OP,
                expected: 5,
                found: if a.rank() != 5 { a.rank() } else { b.rank() },
            });
        }
        let (da, db) = (a.dims(), b.dims());
        check_dim(OP, "A rows", 2, da[1])?;
        check_dim(OP, "A cols", 2, da[2])?;
        check_dim(OP, "groups", da[0], db[0])?;
        check_dim(OP, "b rows", 2, db[1])?;
        check_dim(OP, "b cols", 1, db[2])?;
        check_dim(OP, "height", da[3], db[3])?;
        check_dim(OP, "width", da[4], db[4])?;
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite { op: OP });
        }
        Ok(Self { a, b })
    }

    /// `A = I`, `b = 0` everywhere.
    pub fn identity(n: usize, h: usize, w: usize) -> Self {
        let mut a = Tensor::zeros(&[n, 2, 2, h, w]);
        let hw = h * w;
        for g in 0..n {
            for d in [0, 3] {
                let off = (g * 4 + d) * hw;
                a.data_mut()[off..off + hw].fill(1.0);
            }
        }
        Self {
            a,
            b: Tensor::zeros(&[n, 2, 1, h, w]),
        }
    }

    pub fn groups(&self) -> usize {
        self.a.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.a.dims()[3]
    }

    pub fn width(&self) -> usize {
        self.a.dims()[4]
    }
}

/// Absolute sampling pattern per tap and modulation masks.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformParams {
    /// `(n, 2, 9, H, W)`; `offsets - G` is the deformable delta.
    pub offsets: Tensor,
    /// `(n, 9, H, W)`, each value in `(0, 1)`.
    pub masks: Tensor,
}

impl DeformParams {
    /// Plain-convolution pattern `G` with the given mask value.
    pub fn plain(n: usize, h: usize, w: usize, mask: f32) -> Self {
        let hw = h * w;
        let mut offsets = Tensor::zeros(&[n, 2, TAPS, h, w]);
        for g in 0..n {
            for (row, grid_row) in PositionalGrid::ROWS.iter().enumerate() {
                for (k, &v) in grid_row.iter().enumerate() {
                    let off = ((g * 2 + row) * TAPS + k) * hw;
                    offsets.data_mut()[off..off + hw].fill(v);
                }
            }
        }
        Self {
            offsets,
            masks: Tensor::full(&[n, TAPS, h, w], mask),
        }
    }

    pub fn groups(&self) -> usize {
        self.offsets.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.offsets.dims()[3]
    }

    pub fn width(&self) -> usize {
        self.offsets.dims()[4]
    }

    /// Shape and range checks against a feature of extent `h × w`.
    pub fn check(&self, op: &'static str, h: usize, w: usize) -> Result<()> {
        let (o, m) = (self.offsets.dims(), self.masks.dims());
        if o.len() != 5 || m.len() != 4 {
            return Err(invalid(op, "offsets must be rank 5 and masks rank 4"));
        }
        check_dim(op, "offset coords", 2, o[1])?;
        check_dim(op, "offset taps", TAPS, o[2])?;
        check_dim(op, "mask groups", o[0], m[0])?;
        check_dim(op, "mask taps", TAPS, m[1])?;
        check_dim(op, "height", h, o[3])?;
        check_dim(op, "width", w, o[4])?;
        check_dim(op, "mask height", h, m[2])?;
        check_dim(op, "mask width", w, m[3])?;
        Ok(())
    }
}

/// Sigmoid kept strictly inside `(0, 1)`; `f32` rounds large logits to the
/// end points.
fn open_sigmoid(v: f32) -> f32 {
    sigmoid(v).clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}

/// `P = A·G + b` for every pixel and group.
pub fn offsets_from_affine(af: &AffineField) -> Tensor {
    let (n, h, w) = (af.groups(), af.height(), af.width());
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, 2, TAPS, h, w]);
    let (a, b) = (af.a.data(), af.b.data());
    let o = out.data_mut();
    for g in 0..n {
        let a_at = |i: usize, j: usize| &a[(g * 4 + i * 2 + j) * hw..][..hw];
        let b_at = |i: usize| &b[(g * 2 + i) * hw..][..hw];
        for row in 0..2 {
            let (ar0, ar1, br) = (a_at(row, 0), a_at(row, 1), b_at(row));
            for k in 0..TAPS {
                let (gx, gy) = PositionalGrid::tap(k);
                let dst = &mut o[((g * 2 + row) * TAPS + k) * hw..][..hw];
                for p in 0..hw {
                    dst[p] = ar0[p] * gx + ar1[p] * gy + br[p];
                }
            }
        }
    }
    out
}

/// A small convolutional head over the concatenation of two feature maps:
/// a shared two-layer trunk followed by per-output branches.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorWeights {
    pub trunk: [Conv2d; 2],
    /// `4n` channels, the entries of `A` row-major per group. Absent for v1.
    pub a_branch: Option<Conv2d>,
    /// `2n` channels.
    pub b_branch: Conv2d,
    /// `9n` channels. Absent for v1.
    pub mask_branch: Option<Conv2d>,
    pub groups: usize,
}

impl PredictorWeights {
    /// AdaSTN head for `channels`-wide features: random trunk, zero b-branch.
    pub fn v1(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            trunk: trunk(channels, rng),
            a_branch: None,
            b_branch: Conv2d::zeros(HIDDEN, 2, 3, 1),
            mask_branch: None,
            groups: 1,
        }
    }

    /// AdaSTN v2 head with `n` groups, initialised to the identity pattern.
    pub fn v2(channels: usize, n: usize, rng: &mut impl Rng) -> Self {
        let mut a = Conv2d::zeros(HIDDEN, 4 * n, 3, 1);
        for g in 0..n {
            a.bias.data_mut()[g * 4] = 1.0;
            a.bias.data_mut()[g * 4 + 3] = 1.0;
        }
        let mut mask = Conv2d::zeros(HIDDEN, TAPS * n, 3, 1);
        mask.bias.map_inplace(|_| MASK_BIAS);
        Self {
            trunk: trunk(channels, rng),
            a_branch: Some(a),
            b_branch: Conv2d::zeros(HIDDEN, 2 * n, 3, 1),
            mask_branch: Some(mask),
            groups: n,
        }
    }

    /// Channel count of each of the two input features.
    pub fn feature_channels(&self) -> usize {
        self.trunk[0].in_channels() / 2
    }

    /// Shared trunk activations for a feature pair.
    pub fn trunk_forward(&self, f_ref: &Tensor, f_other: &Tensor) -> Result<Tensor> {
        const OP: &str = "adastn";
        f_ref.check_same_dims(OP, f_other)?;
        let (c, _, _) = f_ref.chw(OP)?;
        check_dim(OP, "feature channels", self.feature_channels(), c)?;
        let mut t = self.trunk[0].forward(&Tensor::concat_channels(&[f_ref, f_other])?)?;
        relu_inplace(&mut t);
        let mut t = self.trunk[1].forward(&t)?;
        relu_inplace(&mut t);
        Ok(t)
    }

    fn validate(&self, op: &'static str, v2: bool) -> Result<()> {
        let n = self.groups;
        check_dim(op, "b-branch channels", 2 * n, self.b_branch.out_channels())?;
        if v2 {
            let a = self.a_branch.as_ref().ok_or_else(|| invalid(op, "missing A branch"))?;
            let m = self.mask_branch.as_ref().ok_or_else(|| invalid(op, "missing mask branch"))?;
            check_dim(op, "A-branch channels", 4 * n, a.out_channels())?;
            check_dim(op, "mask-branch channels", TAPS * n, m.out_channels())?;
        }
        Ok(())
    }

    /// Visits every parameter tensor with a stable name.
    pub fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &'a Tensor)) {
        let convs = self.named_convs();
        for (name, conv) in convs {
            f(alloc::format!("{prefix}.{name}.weight"), &conv.weight);
            f(alloc::format!("{prefix}.{name}.bias"), &conv.bias);
        }
    }

    /// Mutable counterpart of [`Self::for_each_param`], in the same order.
    pub fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &mut Tensor)) {
        for (name, conv) in self.named_convs_mut() {
            f(alloc::format!("{prefix}.{name}.weight"), &mut conv.weight);
            f(alloc::format!("{prefix}.{name}.bias"), &mut conv.bias);
        }
    }

    fn named_convs(&self) -> Vec<(&'static str, &Conv2d)> {
        let mut v = alloc::vec![("trunk0", &self.trunk[0]), ("trunk1", &self.trunk[1])];
        if let Some(a) = &self.a_branch {
            v.push(("a", a));
        }
        v.push(("b", &self.b_branch));
        if let Some(m) = &self.mask_branch {
            v.push(("mask", m));
        }
        v
    }

    fn named_convs_mut(&mut self) -> Vec<(&'static str, &mut Conv2d)> {
        let [t0, t1] = &mut self.trunk;
        let mut v = alloc::vec![("trunk0", t0), ("trunk1", t1)];
        if let Some(a) = &mut self.a_branch {
            v.push(("a", a));
        }
        v.push(("b", &mut self.b_branch));
        if let Some(m) = &mut self.mask_branch {
            v.push(("mask", m));
        }
        v
    }
}

fn trunk(channels: usize, rng: &mut impl Rng) -> [Conv2d; 2] {
    [
        Conv2d::he_normal(2 * channels, HIDDEN, 3, 1, 1.0, rng),
        Conv2d::he_normal(HIDDEN, HIDDEN, 3, 1, 1.0, rng),
    ]
}

/// Residual flow from the b-branch, averaged over groups.
pub fn adastn_predict(f_ref: &Tensor, f_warped: &Tensor, w: &PredictorWeights) -> Result<FlowField> {
    let t = w.trunk_forward(f_ref, f_warped)?;
    adastn_head(&t, w)
}

/// The v1 branch applied to precomputed trunk activations.
pub fn adastn_head(trunk: &Tensor, w: &PredictorWeights) -> Result<FlowField> {
    w.validate("adastn_predict", false)?;
    let b = w.b_branch.forward(trunk)?;
    let (_, h, wd) = b.chw("adastn_predict")?;
    let n = w.groups;
    if n == 1 {
        return FlowField::new(b);
    }
    let hw = h * wd;
    let mut out = Tensor::zeros(&[2, h, wd]);
    for g in 0..n {
        for i in 0..2 {
            let src = b.plane(g * 2 + i);
            for (o, &v) in out.plane_mut(i).iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    out.map_inplace(|v| v / n as f32);
    debug_assert_eq!(out.len(), 2 * hw);
    FlowField::new(out)
}

/// Deformable sampling parameters from the A, b and mask branches.
pub fn adastn_v2_predict(f_i: &Tensor, f_warped: &Tensor, w: &PredictorWeights, n: usize) -> Result<DeformParams> {
    check_dim("adastn_v2_predict", "groups", w.groups, n)?;
    let t = w.trunk_forward(f_i, f_warped)?;
    adastn_v2_head(&t, w)
}

/// The v2 branches applied to precomputed trunk activations.
pub fn adastn_v2_head(trunk: &Tensor, w: &PredictorWeights) -> Result<DeformParams> {
    const OP: &str = "adastn_v2_predict";
    w.validate(OP, true)?;
    let n = w.groups;
    let a = w.a_branch.as_ref().expect("validated").forward(trunk)?;
    let b = w.b_branch.forward(trunk)?;
    let (_, h, wd) = a.chw(OP)?;
    let af = AffineField::new(a.reshape(&[n, 2, 2, h, wd])?, b.reshape(&[n, 2, 1, h, wd])?)?;
    let mut masks = w.mask_branch.as_ref().expect("validated").forward(trunk)?;
    masks.map_inplace(open_sigmoid);
    Ok(DeformParams {
        offsets: offsets_from_affine(&af),
        masks: masks.reshape(&[n, TAPS, h, wd])?,
    })
}

/// What [`adastn_v2_head`] produces when every branch weight is zero: each
/// branch emits its bias at every pixel.
pub fn uniform_params(w: &PredictorWeights, h: usize, wd: usize) -> Result<DeformParams> {
    const OP: &str = "uniform_params";
    w.validate(OP, true)?;
    let n = w.groups;
    let a_bias = w.a_branch.as_ref().expect("validated").bias.data();
    let b_bias = w.b_branch.bias.data();
    let m_bias = w.mask_branch.as_ref().expect("validated").bias.data();
    let hw = h * wd;
    let fill = |vals: &[f32]| -> Vec<f32> { vals.iter().flat_map(|&v| core::iter::repeat_n(v, hw)).collect() };
    let af = AffineField::new(
        Tensor::new(&[n, 2, 2, h, wd], fill(a_bias))?,
        Tensor::new(&[n, 2, 1, h, wd], fill(b_bias))?,
    )?;
    let masks: Vec<f32> = m_bias.iter().map(|&v| open_sigmoid(v)).collect();
    Ok(DeformParams {
        offsets: offsets_from_affine(&af),
        masks: Tensor::new(&[n, TAPS, h, wd], fill(&masks))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::stream_rng;

    fn feature(c: usize, h: usize, w: usize, seed: u32) -> Tensor {
        Tensor::from_fn_chw(c, h, w, |ci, y, x| {
            let v = (ci as u32 * 7919 + y as u32 * 104_729 + x as u32 * 1299 + seed).wrapping_mul(2_654_435_761);
            (v >> 8) as f32 / (1u32 << 24) as f32
        })
    }

    #[test]
    fn grid_rows() {
        assert_eq!(PositionalGrid::ROWS[0], [-1., -1., -1., 0., 0., 0., 1., 1., 1.]);
        assert_eq!(PositionalGrid::ROWS[1], [-1., 0., 1., -1., 0., 1., -1., 0., 1.]);
        for k in 0..TAPS {
            let (dx, dy) = PositionalGrid::tap(k);
            assert_eq!(PositionalGrid::kernel_index(k), ((dy + 1.0) * 3.0 + dx + 1.0) as usize);
        }
    }

    #[test]
    fn identity_affine_gives_grid() {
        let p = offsets_from_affine(&AffineField::identity(2, 3, 4));
        assert_eq!(p, DeformParams::plain(2, 3, 4, 1.0).offsets);
    }

    #[test]
    fn zero_affine_collapses_taps() {
        let mut b = Tensor::zeros(&[1, 2, 1, 2, 2]);
        b.data_mut()[..4].fill(0.75);
        b.data_mut()[4..].fill(-1.5);
        let af = AffineField::new(Tensor::zeros(&[1, 2, 2, 2, 2]), b).unwrap();
        let p = offsets_from_affine(&af);
        assert!(p.data()[..36].iter().all(|&v| v == 0.75));
        assert!(p.data()[36..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn shapes_and_init_state() {
        let mut rng = stream_rng(3, 0);
        let w = PredictorWeights::v2(5, 4, &mut rng);
        let (a, b) = (feature(5, 6, 7, 1), feature(5, 6, 7, 2));
        let d = adastn_v2_predict(&a, &b, &w, 4).unwrap();
        assert_eq!(d.offsets.dims(), &[4, 2, 9, 6, 7]);
        assert_eq!(d.masks.dims(), &[4, 9, 6, 7]);
        assert_eq!(d.offsets, DeformParams::plain(4, 6, 7, 1.0).offsets);
        assert!(d.masks.data().iter().all(|&m| m == sigmoid(MASK_BIAS)));
        assert_eq!(uniform_params(&w, 6, 7).unwrap(), d);
        let v1 = PredictorWeights::v1(5, &mut rng);
        let f = adastn_predict(&a, &b, &v1).unwrap();
        assert!(f.as_tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut rng = stream_rng(3, 0);
        let w = PredictorWeights::v1(4, &mut rng);
        let a = feature(3, 6, 6, 0);
        assert!(matches!(adastn_predict(&a, &a, &w), Err(Error::ShapeMismatch { .. })));
        assert!(adastn_v2_predict(&a, &a, &w, 1).is_err());
    }
}
