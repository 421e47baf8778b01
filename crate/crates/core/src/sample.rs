//! Bilinear sampling, backward warping and factor-of-two resampling.
//!
//! All samplers take positions as an integer base plus a fractional part in
//! `[0, 1)`. Warping splits `x + dx` as `(x + floor(dx), dx - floor(dx))`, so
//! the fractional weight keeps the full precision of the displacement instead
//! of the precision of the absolute coordinate.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Error, Result};
use crate::tensor::{FlowField, Tensor};

/// Factor-of-two resampling direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Half,
    Double,
}

#[inline]
pub(crate) fn split(v: f32) -> (i64, f32) {
    let fl = libm::floorf(v);
    (fl as i64, v - fl)
}

/// Clamp-to-edge bilinear lookup in a single `h × w` plane.
#[inline]
pub(crate) fn sample_clamped(plane: &[f32], w: usize, h: usize, ix: i64, fx: f32, iy: i64, fy: f32) -> f32 {
    let (x0, x1, fx) = clamp_axis(ix, fx, w);
    let (y0, y1, fy) = clamp_axis(iy, fy, h);
    let a = plane[y0 * w + x0];
    let b = plane[y0 * w + x1];
    let c = plane[y1 * w + x0];
    let d = plane[y1 * w + x1];
    let top = a + fx * (b - a);
    let bot = c + fx * (d - c);
    top + fy * (bot - top)
}

#[inline]
fn clamp_axis(i: i64, f: f32, n: usize) -> (usize, usize, f32) {
    let last = n as i64 - 1;
    if i < 0 {
        (0, 0, 0.0)
    } else if i >= last {
        (last as usize, last as usize, 0.0)
    } else if f == 0.0 {
        (i as usize, i as usize, 0.0)
    } else {
        (i as usize, i as usize + 1, f)
    }
}

/// Zero-padded bilinear lookup: corners outside the plane contribute nothing.
#[inline]
pub(crate) fn sample_zero(plane: &[f32], w: usize, h: usize, ix: i64, fx: f32, iy: i64, fy: f32) -> f32 {
    let fetch = |x: i64, y: i64| -> f32 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let a = fetch(ix, iy);
    let (b, c, d) = match (fx == 0.0, fy == 0.0) {
        (true, true) => return a,
        (false, true) => (fetch(ix + 1, iy), 0.0, 0.0),
        (true, false) => (0.0, fetch(ix, iy + 1), 0.0),
        (false, false) => (fetch(ix + 1, iy), fetch(ix, iy + 1), fetch(ix + 1, iy + 1)),
    };
    if fy == 0.0 {
        return a + fx * (b - a);
    }
    if fx == 0.0 {
        return a + fy * (c - a);
    }
    let top = a + fx * (b - a);
    let bot = c + fx * (d - c);
    top + fy * (bot - top)
}

/// Samples `img` (C, H, W) at the absolute `(x, y)` positions stored in
/// `coords` (2, H', W'), with clamp-to-edge boundary handling.
pub fn bilinear_sample(img: &Tensor, coords: &Tensor) -> Result<Tensor> {
    const OP: &str = "bilinear_sample";
    let (c, h, w) = img.chw(OP)?;
    let (cc, oh, ow) = coords.chw(OP)?;
    check_dim(OP, "coordinate channels", 2, cc)?;
    if !coords.is_finite() {
        return Err(Error::NonFinite { op: OP });
    }
    let n = oh * ow;
    let (xs, ys) = (coords.plane(0), coords.plane(1));
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let pos: Vec<(i64, f32, i64, f32)> = (0..n)
        .map(|i| {
            let (ix, fx) = split(xs[i]);
            let (iy, fy) = split(ys[i]);
            (ix, fx, iy, fy)
        })
        .collect();
    for ci in 0..c {
        let src = img.plane(ci);
        let dst = out.plane_mut(ci);
        for (o, &(ix, fx, iy, fy)) in dst.iter_mut().zip(&pos) {
            *o = sample_clamped(src, w, h, ix, fx, iy, fy);
        }
    }
    Ok(out)
}

/// Backward warp: `out(x, y) = feature(x + dx, y + dy)`.
pub fn warp(feature: &Tensor, flow: &FlowField) -> Result<Tensor> {
    const OP: &str = "warp";
    let (c, h, w) = feature.chw(OP)?;
    check_dim(OP, "height", h, flow.height())?;
    check_dim(OP, "width", w, flow.width())?;
    let pos = warp_positions(flow);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let src = feature.plane(ci);
        let dst = out.plane_mut(ci);
        for (o, &(ix, fx, iy, fy)) in dst.iter_mut().zip(&pos) {
            *o = sample_clamped(src, w, h, ix, fx, iy, fy);
        }
    }
    Ok(out)
}

pub(crate) fn warp_positions(flow: &FlowField) -> Vec<(i64, f32, i64, f32)> {
    let (h, w) = (flow.height(), flow.width());
    let (dx, dy) = (flow.dx(), flow.dy());
    let mut pos = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (ox, fx) = split(dx[i]);
            let (oy, fy) = split(dy[i]);
            pos.push((x as i64 + ox, fx, y as i64 + oy, fy));
        }
    }
    pos
}

/// Analytic derivative of `sum(warp(feature, flow))` with respect to every flow
/// component. Positions that hit the clamped border have zero derivative along
/// the clamped axis.
pub fn warp_flow_grad(feature: &Tensor, flow: &FlowField) -> Result<Tensor> {
    const OP: &str = "warp_flow_grad";
    let (c, h, w) = feature.chw(OP)?;
    check_dim(OP, "height", h, flow.height())?;
    check_dim(OP, "width", w, flow.width())?;
    let pos = warp_positions(flow);
    let mut grad = Tensor::zeros(&[2, h, w]);
    let n = h * w;
    for ci in 0..c {
        let p = feature.plane(ci);
        for (i, &(ix, fx, iy, fy)) in pos.iter().enumerate() {
            let (x0, x1, fxc) = clamp_axis(ix, fx, w);
            let (y0, y1, fyc) = clamp_axis(iy, fy, h);
            let x_live = ix >= 0 && ix < w as i64 - 1;
            let y_live = iy >= 0 && iy < h as i64 - 1;
            // Interior positions use the unclamped neighbour even at zero fraction
            // so the one-sided derivative matches a forward perturbation.
            let x1 = if x_live { x0 + 1 } else { x1 };
            let y1 = if y_live { y0 + 1 } else { y1 };
            let a = p[y0 * w + x0];
            let b = p[y0 * w + x1];
            let cc = p[y1 * w + x0];
            let d = p[y1 * w + x1];
            if x_live {
                grad.data_mut()[i] += (1.0 - fyc) * (b - a) + fyc * (d - cc);
            }
            if y_live {
                grad.data_mut()[n + i] += (1.0 - fxc) * (cc - a) + fxc * (d - b);
            }
        }
    }
    Ok(grad)
}

/// Factor-of-two bilinear resampling of a `(C, H, W)` feature tensor.
///
/// Halving averages 2 × 2 blocks (bilinear at half-pixel centres); odd extents
/// are first reflect-padded by one row or column. Doubling samples at
/// `(i + 0.5) / 2 - 0.5` with clamp-to-edge.
pub fn resize(t: &Tensor, scale: Scale) -> Result<Tensor> {
    match scale {
        Scale::Half => halve(t),
        Scale::Double => upsample_bilinear(t, 2),
    }
}

/// Resizes a flow field and rescales its values so displacements stay in
/// pixels of the new resolution.
pub fn resize_flow(flow: &FlowField, scale: Scale) -> Result<FlowField> {
    let (t, s) = match scale {
        Scale::Half => (halve(flow.as_tensor())?, 0.5),
        Scale::Double => (upsample_bilinear(flow.as_tensor(), 2)?, 2.0),
    };
    FlowField::new(t.scale(s))
}

/// Doubles a flow field and crops it to `(h, w)`, for pyramids built from odd
/// extents.
pub fn double_flow_to(flow: &FlowField, h: usize, w: usize) -> Result<FlowField> {
    let up = resize_flow(flow, Scale::Double)?;
    if up.height() == h && up.width() == w {
        return Ok(up);
    }
    FlowField::new(up.as_tensor().crop(0, 0, h, w)?)
}

fn halve(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw("resize")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    // Reflect padding: the virtual row `h` mirrors row `h - 2`.
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else if n >= 2 {
            n - 2
        } else {
            0
        }
    };
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        let src = t.plane(ci);
        let dst = out.plane_mut(ci);
        for y in 0..oh {
            let (y0, y1) = (reflect(2 * y, h), reflect(2 * y + 1, h));
            for x in 0..ow {
                let (x0, x1) = (reflect(2 * x, w), reflect(2 * x + 1, w));
                let s = src[y0 * w + x0] + src[y0 * w + x1] + src[y1 * w + x0] + src[y1 * w + x1];
                dst[y * ow + x] = s * 0.25;
            }
        }
    }
    Ok(out)
}

/// Bilinear upsampling by an integer factor (half-pixel centres, clamp-to-edge).
pub fn upsample_bilinear(t: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(invalid("upsample_bilinear", "factor must be at least 1"));
    }
    let (c, h, w) = t.chw("upsample_bilinear")?;
    let (oh, ow) = (h * factor, w * factor);
    let r = factor as f32;
    let axis = |n: usize| -> Vec<(i64, f32)> {
        (0..n)
            .map(|i| split(((i as f32 + 0.5) / r - 0.5).max(0.0)))
            .collect()
    };
    let (xs, ys) = (axis(ow), axis(oh));
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        let src = t.plane(ci);
        let dst = out.plane_mut(ci);
        for (y, &(iy, fy)) in ys.iter().enumerate() {
            for (x, &(ix, fx)) in xs.iter().enumerate() {
                dst[y * ow + x] = sample_clamped(src, w, h, ix, fx, iy, fy);
            }
        }
    }
    Ok(out)
}

/// Upsamples a flow by `factor` and multiplies its values by `factor`.
pub fn upsample_flow(flow: &FlowField, factor: usize) -> Result<FlowField> {
    FlowField::new(upsample_bilinear(flow.as_tensor(), factor)?.scale(factor as f32))
}

/// Mean over non-overlapping `factor × factor` blocks; extents must divide.
pub fn box_downsample(t: &Tensor, factor: usize) -> Result<Tensor> {
    const OP: &str = "box_downsample";
    let (c, h, w) = t.chw(OP)?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(invalid(OP, "extents must be divisible by the factor"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        let src = t.plane(ci);
        let dst = out.plane_mut(ci);
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0f32;
                for yy in 0..factor {
                    let row = &src[(y * factor + yy) * w + x * factor..][..factor];
                    s += row.iter().sum::<f32>();
                }
                dst[y * ow + x] = s * norm;
            }
        }
    }
    Ok(out)
}

/// Absolute sampling grid `(x + dx, y + dy)` for a flow, usable with
/// [`bilinear_sample`].
pub fn flow_to_coords(flow: &FlowField) -> Tensor {
    let (h, w) = (flow.height(), flow.width());
    let mut t = flow.as_tensor().clone();
    let n = h * w;
    let data = t.data_mut();
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] += x as f32;
            data[n + y * w + x] += y as f32;
        }
    }
    t
}

/// Grid of identity coordinates, handy for tests and resampling.
pub fn identity_coords(h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = x as f32;
            data[h * w + y * w + x] = y as f32;
        }
    }
    Tensor::new(&[2, h, w], data).expect("non-empty grid")
}
