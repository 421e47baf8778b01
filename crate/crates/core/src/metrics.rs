//! Image quality metrics on `[0, 1]` data.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::filter::{gaussian_kernel, separable_valid};
use crate::tensor::Tensor;

/// Reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_dims("psnr", b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP))
}

/// Gaussian-window SSIM (11 taps, σ = 1.5) over the valid region, averaged
/// over channels and positions.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, 0.01, 0.03)
}

pub fn ssim_with(a: &Tensor, b: &Tensor, window: usize, k1: f64, k2: f64) -> Result<f64> {
    const OP: &str = "ssim";
    a.check_same_dims(OP, b)?;
    let (c, h, w) = a.chw(OP)?;
    if h < window || w < window {
        return Err(Error::TooSmall {
            op: OP,
            reason: format!("{h}×{w} is smaller than the {window}-pixel window"),
        });
    }
    let (c1, c2) = ((k1 * k1), (k2 * k2));
    let taps = gaussian_kernel(window, SSIM_SIGMA);
    let mut total = 0.0;
    for ci in 0..c {
        let x: Vec<f64> = a.plane(ci).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(ci).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ow, oh) = separable_valid(&x, w, h, &taps);
        let (my, _, _) = separable_valid(&y, w, h, &taps);
        let (sxx, _, _) = separable_valid(&xx, w, h, &taps);
        let (syy, _, _) = separable_valid(&yy, w, h, &taps);
        let (sxy, _, _) = separable_valid(&xy, w, h, &taps);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / c as f64)
}
