//! Dense row-major `f32` arrays and the two-channel flow field built on them.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Error, Result};

/// A dense row-major array. Image-like tensors use `(C, H, W)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(invalid("Tensor::new", "every extent must be at least 1"));
        }
        let len: usize = dims.iter().product();
        check_dim("Tensor::new", "element count", len, data.len())?;
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Panics if any extent is zero.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        assert!(
            !dims.is_empty() && dims.iter().all(|&d| d > 0),
            "tensor extents must be at least 1: {dims:?}"
        );
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    /// Builds a `(C, H, W)` tensor from a per-element function of `(c, y, x)`.
    pub fn from_fn_chw(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self {
            dims: vec![c, h, w],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Interprets the tensor as `(C, H, W)`.
    pub fn chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.rank() != 3 {
            return Err(Error::RankMismatch {
                op,
                expected: 3,
                found: self.rank(),
            });
        }
        Ok((self.dims[0], self.dims[1], self.dims[2]))
    }

    /// The `c`-th `H × W` plane of a `(C, H, W)` tensor.
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.dims[self.rank() - 2] * self.dims[self.rank() - 1];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.dims[self.rank() - 2] * self.dims[self.rank() - 1];
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.check_same_dims("Tensor::zip_map", other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn check_same_dims(&self, op: &'static str, other: &Tensor) -> Result<()> {
        check_dim(op, "rank", self.rank(), other.rank())?;
        for (axis, (&a, &b)) in ["axis 0", "axis 1", "axis 2", "axis 3", "axis 4"]
            .iter()
            .zip(self.dims.iter().zip(&other.dims))
        {
            check_dim(op, axis, a, b)?;
        }
        Ok(())
    }

    /// Stacks `(C_i, H, W)` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("Tensor::concat_channels", "no inputs"))?;
        let (_, h, w) = first.chw("Tensor::concat_channels")?;
        let mut c_total = 0;
        for p in parts {
            let (c, ph, pw) = p.chw("Tensor::concat_channels")?;
            check_dim("Tensor::concat_channels", "height", h, ph)?;
            check_dim("Tensor::concat_channels", "width", w, pw)?;
            c_total += c;
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            dims: vec![c_total, h, w],
            data,
        })
    }

    /// Channel range `[start, start + count)` of a `(C, H, W)` tensor.
    pub fn channels(&self, start: usize, count: usize) -> Result<Self> {
        let (c, h, w) = self.chw("Tensor::channels")?;
        if count == 0 || start + count > c {
            return Err(invalid("Tensor::channels", "channel range out of bounds"));
        }
        let hw = h * w;
        Ok(Self {
            dims: vec![count, h, w],
            data: self.data[start * hw..(start + count) * hw].to_vec(),
        })
    }

    /// Spatial crop of a `(C, H, W)` tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (c, sh, sw) = self.chw("Tensor::crop")?;
        if h == 0 || w == 0 || y0 + h > sh || x0 + w > sw {
            return Err(invalid("Tensor::crop", "crop window out of bounds"));
        }
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            let plane = self.plane(ci);
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * sw + x0..y * sw + x0 + w]);
            }
        }
        Ok(Self {
            dims: vec![c, h, w],
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.check_same_dims("Tensor::max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel displacement `(dx, dy)` in pixels, stored as a `(2, H, W)` tensor.
///
/// Flows follow the backward-warping convention: the value at `p` points to the
/// location in the source image that lands on `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.chw("FlowField::new")?;
        check_dim("FlowField::new", "channels", 2, c)?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "FlowField::new" });
        }
        Ok(Self(t))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[2, h, w]))
    }

    pub fn uniform(h: usize, w: usize, dx: f32, dy: f32) -> Self {
        let mut t = Tensor::zeros(&[2, h, w]);
        t.plane_mut(0).fill(dx);
        t.plane_mut(1).fill(dy);
        Self(t)
    }

    /// Builds a flow from a per-pixel function of `(x, y)` returning `(dx, dy)`.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut t = Tensor::zeros(&[2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = f(x, y);
                t.data[y * w + x] = dx;
                t.data[h * w + y * w + x] = dy;
            }
        }
        Self(t)
    }

    pub fn height(&self) -> usize {
        self.0.dims[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims[2]
    }

    pub fn dx(&self) -> &[f32] {
        self.0.plane(0)
    }

    pub fn dy(&self) -> &[f32] {
        self.0.plane(1)
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width() + x;
        (self.dx()[i], self.dy()[i])
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub(crate) fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }

    pub fn add(&self, other: &FlowField) -> Result<Self> {
        Ok(Self(self.0.add(&other.0)?))
    }

    pub fn sub(&self, other: &FlowField) -> Result<Self> {
        Ok(Self(self.0.sub(&other.0)?))
    }

    pub fn scale(&self, s: f32) -> Self {
        Self(self.0.scale(s))
    }

    /// Mean displacement over all pixels.
    pub fn mean(&self) -> (f64, f64) {
        let n = (self.height() * self.width()) as f64;
        let sx: f64 = self.dx().iter().map(|&v| v as f64).sum();
        let sy: f64 = self.dy().iter().map(|&v| v as f64).sum();
        (sx / n, sy / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent_and_wrong_length() {
        assert!(Tensor::new(&[2, 0, 3], vec![]).is_err());
        assert!(matches!(
            Tensor::new(&[2, 2], vec![0.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn flow_rejects_bad_channels_and_nan() {
        assert!(FlowField::new(Tensor::zeros(&[3, 2, 2])).is_err());
        let mut t = Tensor::zeros(&[2, 2, 2]);
        t.data_mut()[1] = f32::NAN;
        assert_eq!(
            FlowField::new(t),
            Err(Error::NonFinite { op: "FlowField::new" })
        );
    }

    #[test]
    fn crop_and_concat() {
        let t = Tensor::from_fn_chw(2, 3, 4, |c, y, x| (c * 100 + y * 10 + x) as f32);
        let c = t.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[12.0, 13.0, 22.0, 23.0, 112.0, 113.0, 122.0, 123.0]);
        let cat = Tensor::concat_channels(&[&t, &t.channels(1, 1).unwrap()]).unwrap();
        assert_eq!(cat.dims(), &[3, 3, 4]);
        assert_eq!(cat.plane(2), t.plane(1));
    }
}
