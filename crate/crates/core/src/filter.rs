//! Box and Gaussian window statistics shared by flow estimation, guided
//! filtering and the image metrics. Sums are accumulated in `f64`.

use alloc::vec;
use alloc::vec::Vec;

/// Mean over the `(2r+1)²` window around each pixel, clipped to the image and
/// normalised by the number of pixels actually covered.
pub fn box_mean(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    // Integral image with a zero border row/column.
    let stride = w + 1;
    let mut integral = vec![0.0f64; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += src[y * w + x];
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let s = integral[y1 * stride + x1] - integral[y0 * stride + x1] - integral[y1 * stride + x0]
                + integral[y0 * stride + x0];
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Normalised 1-D Gaussian taps of length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" correlation with a square kernel built from `taps`;
/// the output is `(h - n + 1) × (w - n + 1)`.
pub fn separable_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[(y + i) * ow + x])
                .sum();
        }
    }
    (out, ow, oh)
}

/// Central-difference gradients with reflect padding (so both are zero on the
/// outermost rows/columns along their axis).
pub fn central_gradients(p: &[f32], w: usize, h: usize) -> (Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let refl = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i).min(n as isize - 1) as usize
        } else if i >= n as isize {
            (2 * (n as isize - 1) - i).max(0) as usize
        } else {
            i as usize
        }
    };
    for y in 0..h {
        for x in 0..w {
            let xl = refl(x as isize - 1, w);
            let xr = refl(x as isize + 1, w);
            let yu = refl(y as isize - 1, h);
            let yd = refl(y as isize + 1, h);
            gx[y * w + x] = 0.5 * (p[y * w + xr] - p[y * w + xl]);
            gy[y * w + x] = 0.5 * (p[yd * w + x] - p[yu * w + x]);
        }
    }
    (gx, gy)
}
