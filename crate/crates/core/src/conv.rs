//! Same-size grouped convolution, pixel shuffle and pointwise activations.
//!
//! Convolutions lower to an im2col matrix multiplied through `matrixmultiply`.
//! Every output element accumulates its taps in a fixed order, so results do
//! not depend on how the caller schedules work across threads.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, invalid, Error, Result};
use crate::tensor::Tensor;

/// Upper bound on im2col scratch, in floats.
const COLS_BUDGET: usize = 1 << 18;

/// A stride-1, zero-padded, odd-kernel convolution with per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `(C_out, C_in / groups, k, k)`.
    pub weight: Tensor,
    /// `(C_out)`.
    pub bias: Tensor,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, groups: usize) -> Result<Self> {
        const OP: &str = "Conv2d::new";
        if weight.rank() != 4 {
            return Err(Error::RankMismatch {
                op: OP,
                expected: 4,
                found: weight.rank(),
            });
        }
        let d = weight.dims();
        check_dim(OP, "kernel width", d[2], d[3])?;
        if d[2] % 2 == 0 {
            return Err(invalid(OP, "kernel size must be odd"));
        }
        check_dim(OP, "bias length", d[0], bias.len())?;
        if groups == 0 || d[0] % groups != 0 {
            return Err(invalid(OP, "output channels must divide into groups"));
        }
        Ok(Self {
            weight,
            bias,
            groups,
        })
    }

    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, groups: usize) -> Self {
        assert!(c_in % groups == 0 && c_out % groups == 0);
        Self {
            weight: Tensor::zeros(&[c_out, c_in / groups, kernel, kernel]),
            bias: Tensor::zeros(&[c_out]),
            groups,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.weight, Some(self.bias.data()), self.groups)
    }

    /// He-normal weights (`std = gain · sqrt(2 / fan_in)`) and zero bias.
    pub fn he_normal(c_in: usize, c_out: usize, kernel: usize, groups: usize, gain: f32, rng: &mut impl Rng) -> Self {
        let mut conv = Self::zeros(c_in, c_out, kernel, groups);
        let fan_in = (c_in / groups * kernel * kernel) as f32;
        let std = gain * libm::sqrtf(2.0 / fan_in);
        for v in conv.weight.data_mut() {
            let z: f32 = StandardNormal.sample(rng);
            *v = z * std;
        }
        conv
    }

    /// Delta kernel mapping channel `c` to channel `c` (square, ungrouped).
    pub fn identity(channels: usize, kernel: usize) -> Self {
        let mut conv = Self::zeros(channels, channels, kernel, 1);
        let kk = kernel * kernel;
        let centre = (kernel / 2) * kernel + kernel / 2;
        for c in 0..channels {
            conv.weight.data_mut()[(c * channels + c) * kk + centre] = 1.0;
        }
        conv
    }
}

/// Grouped cross-correlation with stride 1 and zero padding `k / 2`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&[f32]>, groups: usize) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (c_in, h, w) = input.chw(OP)?;
    if weight.rank() != 4 {
        return Err(Error::RankMismatch {
            op: OP,
            expected: 4,
            found: weight.rank(),
        });
    }
    let (c_out, cin_g, k, k2) = (weight.dims()[0], weight.dims()[1], weight.dims()[2], weight.dims()[3]);
    check_dim(OP, "kernel width", k, k2)?;
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(invalid(OP, "channel counts must be divisible by groups"));
    }
    check_dim(OP, "input channels per group", c_in / groups, cin_g)?;
    if let Some(b) = bias {
        check_dim(OP, "bias length", c_out, b.len())?;
    }
    let mut out = Tensor::zeros(&[c_out, h, w]);
    let cout_g = c_out / groups;
    let kk = k * k;
    let kdim = cin_g * kk;
    let hw = h * w;

    for g in 0..groups {
        let wslice = &weight.data()[g * cout_g * kdim..(g + 1) * cout_g * kdim];
        let out_off = g * cout_g * hw;
        if k == 1 {
            let src = &input.data()[g * cin_g * hw..(g + 1) * cin_g * hw];
            gemm(cout_g, kdim, hw, wslice, src, hw, &mut out.data_mut()[out_off..], hw);
            continue;
        }
        let rows = (COLS_BUDGET / (kdim * w)).clamp(1, h);
        let mut cols = vec![0.0f32; kdim * rows * w];
        let mut y0 = 0;
        while y0 < h {
            let y1 = (y0 + rows).min(h);
            let n = (y1 - y0) * w;
            im2col(input, g * cin_g, cin_g, k, y0, y1, &mut cols[..kdim * n]);
            gemm(
                cout_g,
                kdim,
                n,
                wslice,
                &cols[..kdim * n],
                n,
                &mut out.data_mut()[out_off + y0 * w..],
                hw,
            );
            y0 = y1;
        }
    }
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            if bv != 0.0 {
                for v in out.plane_mut(co) {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

fn im2col(input: &Tensor, c0: usize, cin: usize, k: usize, y0: usize, y1: usize, cols: &mut [f32]) {
    let (h, w) = (input.dims()[1], input.dims()[2]);
    let pad = (k / 2) as isize;
    let n = (y1 - y0) * w;
    for ci in 0..cin {
        let plane = input.plane(c0 + ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                let dx = kx as isize - pad;
                for (ti, y) in (y0..y1).enumerate() {
                    let dst = &mut row[ti * w..(ti + 1) * w];
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // dst[x] = src[x + dx] where in range.
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    dst[..lo.min(w)].fill(0.0);
                    if lo < hi {
                        let s0 = (lo as isize + dx) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                    dst[hi.max(lo).min(w)..].fill(0.0);
                }
            }
        }
    }
}

/// `c[m × n] = a[m × k] · b[k × n]`, all row-major; `c` rows are `ldc` apart.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], ldb: usize, c: &mut [f32], ldc: usize) {
    assert!(a.len() >= m * k);
    assert!(k == 0 || b.len() >= (k - 1) * ldb + n);
    assert!(m == 0 || c.len() >= (m - 1) * ldc + n);
    // SAFETY: the asserts above bound every index the kernel touches; the
    // strides describe row-major layouts of the given extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            ldb as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Depth-to-space: `out[c, s·y + dy, s·x + dx] = in[c·s² + dy·s + dx, y, x]`.
pub fn pixel_shuffle(input: &Tensor, s: usize) -> Result<Tensor> {
    const OP: &str = "pixel_shuffle";
    let (c, h, w) = input.chw(OP)?;
    if s == 0 || c % (s * s) != 0 {
        return Err(invalid(OP, "channel count must be divisible by s²"));
    }
    let oc = c / (s * s);
    let (oh, ow) = (h * s, w * s);
    let mut out = Tensor::zeros(&[oc, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for co in 0..oc {
        for dy in 0..s {
            for dx in 0..s {
                let ci = co * s * s + dy * s + dx;
                for y in 0..h {
                    for x in 0..w {
                        dst[(co * oh + s * y + dy) * ow + s * x + dx] = src[(ci * h + y) * w + x];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(input: &Tensor, s: usize) -> Result<Tensor> {
    const OP: &str = "pixel_unshuffle";
    let (c, h, w) = input.chw(OP)?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(invalid(OP, "spatial extents must be divisible by s"));
    }
    let (oh, ow) = (h / s, w / s);
    let mut out = Tensor::zeros(&[c * s * s, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let co = ci * s * s + dy * s + dx;
                for y in 0..oh {
                    for x in 0..ow {
                        dst[(co * oh + y) * ow + x] = src[(ci * h + s * y + dy) * w + s * x + dx];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn relu_inplace(t: &mut Tensor) {
    t.map_inplace(|v| v.max(0.0));
}

pub fn leaky_relu_inplace(t: &mut Tensor, slope: f32) {
    t.map_inplace(|v| if v >= 0.0 { v } else { v * slope });
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-v))
}

/// Per-channel spatial mean of a `(C, H, W)` tensor, as a `(C, 1, 1)` tensor.
pub fn global_avg_pool(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw("global_avg_pool")?;
    let n = (h * w) as f32;
    let data: Vec<f32> = (0..c).map(|ci| t.plane(ci).iter().sum::<f32>() / n).collect();
    Tensor::new(&[c, 1, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Direct triple-loop grouped convolution.
    fn conv_oracle(input: &Tensor, weight: &Tensor, bias: &[f32], groups: usize) -> Tensor {
        let (c_in, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
        let (c_out, cin_g, k) = (weight.dims()[0], weight.dims()[1], weight.dims()[2]);
        let cout_g = c_out / groups;
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(&[c_out, h, w]);
        for co in 0..c_out {
            let g = co / cout_g;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co] as f64;
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = x as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let iv = input.data()[((g * cin_g + ci) * h + sy as usize) * w + sx as usize];
                                let wv = weight.data()[((co * cin_g + ci) * k + ky) * k + kx];
                                acc += iv as f64 * wv as f64;
                            }
                        }
                    }
                    out.data_mut()[(co * h + y) * w + x] = acc as f32;
                }
            }
        }
        let _ = c_in;
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 5, 6], &mut rng);
        let conv = Conv2d::identity(1, 3);
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_interior() {
        let x = Tensor::full(&[1, 5, 5], 0.5);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1).unwrap();
        assert_eq!(y.data()[2 * 5 + 2], 4.5);
        assert_eq!(y.data()[0], 2.0);
    }

    #[test]
    fn random_three_channel_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 6, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let got = conv2d(&x, &w, Some(b.data()), 1).unwrap();
        let want = conv_oracle(&x, &w, b.data(), 1);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-5);
    }

    #[test]
    fn wide_input_uses_row_tiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[64, 40, 120], &mut rng);
        let w = random(&[8, 64, 3, 3], &mut rng);
        let got = conv2d(&x, &w, None, 1).unwrap();
        let want = conv_oracle(&x, &w, &[0.0; 8], 1);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-4);
    }

    #[test]
    fn pointwise_kernel_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 5, 7], &mut rng);
        let w = random(&[6, 2, 1, 1], &mut rng);
        let b = random(&[6], &mut rng);
        let got = conv2d(&x, &w, Some(b.data()), 2).unwrap();
        assert!(got.max_abs_diff(&conv_oracle(&x, &w, b.data(), 2)).unwrap() <= 1e-5);
    }

    #[test]
    fn group_mismatch_is_an_error() {
        let x = Tensor::zeros(&[3, 4, 4]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, 2).is_err());
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, 1),
            Err(Error::ShapeMismatch { axis: "input channels per group", .. })
        ));
    }

    #[test]
    fn pixel_shuffle_shapes_and_index_map() {
        let x = Tensor::new(&[4, 1, 1], vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2]);
        // out[0, dy, dx] = in[dy·2 + dx]
        assert_eq!(y.data(), &[10.0, 11.0, 12.0, 13.0]);
        assert_eq!(pixel_shuffle(&Tensor::zeros(&[4, 2, 2]), 2).unwrap().dims(), &[1, 4, 4]);
        assert!(pixel_shuffle(&Tensor::zeros(&[3, 2, 2]), 2).is_err());
    }

    proptest::proptest! {
        #[test]
        fn conv_matches_oracle_on_random_instances(
            seed in 0u64..10_000,
            h in 1usize..=8,
            w in 1usize..=8,
            groups in 1usize..=2,
            cin_g in 1usize..=2,
            cout_g in 1usize..=2,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[cin_g * groups, h, w], &mut rng);
            let wt = random(&[cout_g * groups, cin_g, 3, 3], &mut rng);
            let b = random(&[cout_g * groups], &mut rng);
            let got = conv2d(&x, &wt, Some(b.data()), groups).unwrap();
            proptest::prop_assert!(got.max_abs_diff(&conv_oracle(&x, &wt, b.data(), groups)).unwrap() <= 1e-5);
        }

        #[test]
        fn shuffle_then_unshuffle_is_identity(seed in 0u64..1000, c in 1usize..=3, s in 1usize..=3, h in 1usize..=4, w in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[c * s * s, h, w], &mut rng);
            let y = pixel_unshuffle(&pixel_shuffle(&x, s).unwrap(), s).unwrap();
            proptest::prop_assert_eq!(y, x);
        }
    }
}
