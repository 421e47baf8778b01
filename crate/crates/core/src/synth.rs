//! Synthetic paired sequences with exact ground truth.
//!
//! A scene is an analytic texture (band-limited waves plus soft-edged discs)
//! viewed through a moving camera, so every frame is a point sample of a known
//! function and the inter-frame backward flows are known in closed form. The
//! degradation step emulates a wide/tele dual-camera capture: a centre crop of
//! the field of view, box decimation, blur, noise, a per-channel colour shift
//! on the low-resolution branch and a sub-pixel shift of the high-resolution
//! branch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::filter::gaussian_kernel;
use crate::sample::{bilinear_sample, box_downsample};
use crate::tensor::{FlowField, Tensor};

/// Seeded generator for an independent stream, so per-frame randomness does
/// not depend on evaluation order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionModel {
    /// Content translation in pixels per frame.
    pub velocity: (f32, f32),
    /// Per-frame linear drift about the frame centre (row-major 2 × 2, acting
    /// on `(x, y)`); zero for pure translation.
    pub drift: [f32; 4],
    /// Standard deviation of an extra per-frame camera jitter, in pixels.
    pub jitter: f32,
}

impl Default for MotionModel {
    fn default() -> Self {
        Self {
            velocity: (0.0, 0.0),
            drift: [0.0; 4],
            jitter: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureParams {
    /// Number of plane waves.
    pub waves: usize,
    /// Shortest wavelength in pixels; wavelengths span one decade above it.
    pub min_wavelength: f32,
    /// Number of soft-edged discs.
    pub discs: usize,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            waves: 24,
            min_wavelength: 6.0,
            discs: 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub motion: MotionModel,
    pub texture: TextureParams,
}

impl SceneParams {
    pub fn new(seed: u64, height: usize, width: usize, frames: usize) -> Self {
        Self {
            seed,
            height,
            width,
            frames,
            motion: MotionModel::default(),
            texture: TextureParams::default(),
        }
    }

    pub fn with_velocity(mut self, vx: f32, vy: f32) -> Self {
        self.motion.velocity = (vx, vy);
        self
    }
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

struct Disc {
    cx: f64,
    cy: f64,
    radius: f64,
    colour: [f64; 3],
}

/// Analytic RGB texture defined on the whole plane.
pub struct Texture {
    base: [f64; 3],
    waves: Vec<Wave>,
    discs: Vec<Disc>,
}

impl Texture {
    /// Draws a texture whose discs are scattered over an `h × w` region.
    pub fn random(seed: u64, h: usize, w: usize, p: &TextureParams) -> Self {
        let mut rng = stream_rng(seed, 0);
        let base = [0.5, 0.5, 0.5];
        let mut waves = Vec::with_capacity(p.waves);
        let mut total = 0.0;
        for _ in 0..p.waves {
            let octave: f64 = rng.random_range(0.0..1.0);
            let wavelength = p.min_wavelength as f64 * libm::pow(10.0, octave);
            let theta: f64 = rng.random_range(0.0..2.0 * PI);
            let k = 2.0 * PI / wavelength;
            let strength = libm::sqrt(wavelength);
            total += strength;
            let mut amp = [0.0; 3];
            for a in &mut amp {
                *a = strength * rng.random_range(0.6..1.0);
            }
            waves.push(Wave {
                kx: k * libm::cos(theta),
                ky: k * libm::sin(theta),
                phase: rng.random_range(0.0..2.0 * PI),
                amp,
            });
        }
        // Wave amplitudes sum to at most 0.3 so values stay inside [0, 1] almost
        // everywhere.
        if total > 0.0 {
            for wv in &mut waves {
                for a in &mut wv.amp {
                    *a *= 0.3 / total;
                }
            }
        }
        let discs = (0..p.discs)
            .map(|_| {
                let mut colour = [0.0; 3];
                for c in &mut colour {
                    *c = rng.random_range(-0.15..0.15);
                }
                Disc {
                    cx: rng.random_range(0.0..w as f64),
                    cy: rng.random_range(0.0..h as f64),
                    radius: rng.random_range(3.0..(h.min(w) as f64 / 4.0).max(4.0)),
                    colour,
                }
            })
            .collect();
        Self { base, waves, discs }
    }

    pub fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let mut v = self.base;
        for wv in &self.waves {
            let s = libm::sin(wv.kx * x + wv.ky * y + wv.phase);
            for (c, a) in v.iter_mut().zip(&wv.amp) {
                *c += a * s;
            }
        }
        for d in &self.discs {
            let dist = libm::sqrt((x - d.cx) * (x - d.cx) + (y - d.cy) * (y - d.cy));
            // Edge roughly one pixel wide.
            let inside = 1.0 / (1.0 + libm::exp((dist - d.radius) * 2.0));
            for (c, col) in v.iter_mut().zip(&d.colour) {
                *c += inside * col;
            }
        }
        v.map(|c| c.clamp(0.0, 1.0))
    }

    /// Renders `frame(p) = texture(map(p))` as a `(3, h, w)` tensor.
    pub fn render(&self, h: usize, w: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
        let mut t = Tensor::zeros(&[3, h, w]);
        let n = h * w;
        let data = t.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = map(x as f64, y as f64);
                let v = self.eval(sx, sy);
                for (c, val) in v.iter().enumerate() {
                    data[c * n + y * w + x] = *val as f32;
                }
            }
        }
        t
    }
}

/// Rendered frames and the backward flows between consecutive frames:
/// `warp(frames[t + 1], flows[t]) ≈ frames[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frames: Vec<Tensor>,
    pub flows: Vec<FlowField>,
}

pub fn make_scene(p: &SceneParams) -> Result<Scene> {
    if p.frames == 0 || p.height == 0 || p.width == 0 {
        return Err(invalid("make_scene", "frames and extents must be at least 1"));
    }
    let texture = Texture::random(p.seed, p.height, p.width, &p.texture);
    let (cx, cy) = ((p.width as f64 - 1.0) / 2.0, (p.height as f64 - 1.0) / 2.0);
    let (vx, vy) = (p.motion.velocity.0 as f64, p.motion.velocity.1 as f64);
    let d = p.motion.drift.map(|v| v as f64);
    let offsets: Vec<(f64, f64)> = (0..p.frames)
        .map(|t| {
            let (mut ox, mut oy) = (vx * t as f64, vy * t as f64);
            if p.motion.jitter > 0.0 {
                let mut rng = stream_rng(p.seed, 1 + t as u64);
                let jx: f64 = StandardNormal.sample(&mut rng);
                let jy: f64 = StandardNormal.sample(&mut rng);
                ox += p.motion.jitter as f64 * jx;
                oy += p.motion.jitter as f64 * jy;
            }
            (ox, oy)
        })
        .collect();

    // Frame t shows texture((I - tD)(p - c) + c - o_t).
    let frames = (0..p.frames)
        .map(|t| {
            let tf = t as f64;
            let (ox, oy) = offsets[t];
            texture.render(p.height, p.width, |x, y| {
                let (rx, ry) = (x - cx, y - cy);
                (
                    rx - tf * (d[0] * rx + d[1] * ry) + cx - ox,
                    ry - tf * (d[2] * rx + d[3] * ry) + cy - oy,
                )
            })
        })
        .collect();

    // Solving frame_{t+1}(p + F) = frame_t(p) gives
    // F = (I - (t+1)D)^-1 [D(p - c) + o_{t+1} - o_t].
    let mut flows = Vec::with_capacity(p.frames.saturating_sub(1));
    for t in 0..p.frames.saturating_sub(1) {
        let s = (t + 1) as f64;
        let m = [1.0 - s * d[0], -s * d[1], -s * d[2], 1.0 - s * d[3]];
        let det = m[0] * m[3] - m[1] * m[2];
        if det.abs() < 1e-9 {
            return Err(invalid("make_scene", "drift makes the frame mapping singular"));
        }
        let (dox, doy) = (offsets[t + 1].0 - offsets[t].0, offsets[t + 1].1 - offsets[t].1);
        flows.push(FlowField::from_fn(p.height, p.width, |x, y| {
            let (rx, ry) = (x as f64 - cx, y as f64 - cy);
            let (bx, by) = (d[0] * rx + d[1] * ry + dox, d[2] * rx + d[3] * ry + doy);
            (
                ((m[3] * bx - m[1] * by) / det) as f32,
                ((-m[2] * bx + m[0] * by) / det) as f32,
            )
        }));
    }
    Ok(Scene { frames, flows })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeParams {
    /// Fraction of the low-resolution field of view kept by the centre crop.
    pub focal_crop: f32,
    pub scale: usize,
    pub blur_sigma: f32,
    pub noise_sigma: f32,
    pub gain: [f32; 3],
    pub offset: [f32; 3],
    /// Displacement of the high-resolution content relative to the
    /// low-resolution view, in high-resolution pixels.
    pub misalign: (f32, f32),
    pub seed: u64,
    /// Round both branches to 8-bit levels.
    pub quantize: bool,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            focal_crop: 0.58,
            scale: 4,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            gain: [1.0; 3],
            offset: [0.0; 3],
            misalign: (0.0, 0.0),
            seed: 0,
            quantize: true,
        }
    }
}

impl DegradeParams {
    /// Crop, scale and nothing else.
    pub fn identity(scale: usize) -> Self {
        Self {
            focal_crop: 1.0,
            scale,
            quantize: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_crop > 0.0 && self.focal_crop <= 1.0) {
            return Err(invalid("DegradeParams", "focal_crop must be in (0, 1]"));
        }
        if !matches!(self.scale, 2 | 4) {
            return Err(invalid("DegradeParams", "scale must be 2 or 4"));
        }
        if self.blur_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(invalid("DegradeParams", "blur and noise must be non-negative"));
        }
        Ok(())
    }

    /// Low-resolution extent kept from an uncropped high-resolution extent.
    pub fn lr_extent(&self, hr_extent: usize) -> usize {
        libm::roundf(self.focal_crop * (hr_extent / self.scale) as f32) as usize
    }
}

/// A low/high-resolution pair of sequences with the ground truth that produced
/// it. `flows` are the inter-frame backward flows at low resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSequence {
    pub lr: Vec<Tensor>,
    pub hr: Vec<Tensor>,
    pub flows: Vec<FlowField>,
    pub degrade: DegradeParams,
}

impl PairedSequence {
    pub fn frames(&self) -> usize {
        self.lr.len()
    }

    pub fn scale(&self) -> usize {
        self.degrade.scale
    }
}

pub fn degrade(scene: &Scene, d: &DegradeParams) -> Result<PairedSequence> {
    const OP: &str = "degrade";
    d.validate()?;
    let first = scene
        .frames
        .first()
        .ok_or(Error::EmptySequence { op: OP })?;
    let (_, h, w) = first.chw(OP)?;
    let r = d.scale;
    let (lh, lw) = (d.lr_extent(h), d.lr_extent(w));
    let (ch, cw) = (lh * r, lw * r);
    if ch < 16 || cw < 16 || lh == 0 || lw == 0 {
        return Err(Error::TooSmall {
            op: OP,
            reason: format!("crop of {ch}×{cw} is below 16×16"),
        });
    }
    if ch > h || cw > w {
        return Err(invalid(OP, "crop exceeds the frame"));
    }
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);

    // HR branch samples the full frame at p + o - misalign.
    let (mx, my) = d.misalign;
    let hr_coords = {
        let mut data = vec![0.0f32; 2 * ch * cw];
        for y in 0..ch {
            for x in 0..cw {
                data[y * cw + x] = (x + ox) as f32 - mx;
                data[ch * cw + y * cw + x] = (y + oy) as f32 - my;
            }
        }
        Tensor::new(&[2, ch, cw], data)?
    };
    let blur = (d.blur_sigma > 0.0).then(|| {
        let radius = libm::ceilf(3.0 * d.blur_sigma) as usize;
        gaussian_kernel(2 * radius + 1, d.blur_sigma as f64)
    });

    let mut lr = Vec::with_capacity(scene.frames.len());
    let mut hr = Vec::with_capacity(scene.frames.len());
    for (t, frame) in scene.frames.iter().enumerate() {
        let mut hr_t = if mx == 0.0 && my == 0.0 {
            frame.crop(oy, ox, ch, cw)?
        } else {
            bilinear_sample(frame, &hr_coords)?
        };
        let mut lr_t = box_downsample(&frame.crop(oy, ox, ch, cw)?, r)?;
        if let Some(taps) = &blur {
            lr_t = blur_clamped(&lr_t, taps);
        }
        if d.noise_sigma > 0.0 {
            let mut rng = stream_rng(d.seed, 1000 + t as u64);
            for v in lr_t.data_mut() {
                let n: f32 = StandardNormal.sample(&mut rng);
                *v += d.noise_sigma * n;
            }
        }
        let n = lh * lw;
        for c in 0..3usize.min(lr_t.dims()[0]) {
            let (g, o) = (d.gain[c], d.offset[c]);
            if g != 1.0 || o != 0.0 {
                for v in &mut lr_t.data_mut()[c * n..(c + 1) * n] {
                    *v = g * *v + o;
                }
            }
        }
        lr_t.map_inplace(|v| v.clamp(0.0, 1.0));
        if d.quantize {
            quantize_8bit(&mut lr_t);
            quantize_8bit(&mut hr_t);
        }
        lr.push(lr_t);
        hr.push(hr_t);
    }

    let flows = scene
        .flows
        .iter()
        .map(|f| {
            let cropped = f.as_tensor().crop(oy, ox, ch, cw)?;
            FlowField::new(box_downsample(&cropped, r)?.scale(1.0 / r as f32))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PairedSequence {
        lr,
        hr,
        flows,
        degrade: *d,
    })
}

/// Rounds values to the nearest of the 256 levels `k / 255`.
pub fn quantize_8bit(t: &mut Tensor) {
    t.map_inplace(|v| libm::roundf(v.clamp(0.0, 1.0) * 255.0) / 255.0);
}

fn blur_clamped(t: &Tensor, taps: &[f64]) -> Tensor {
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let r = (taps.len() / 2) as isize;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut tmp = vec![0.0f64; h * w];
    for ci in 0..c {
        let src = t.plane(ci);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                        k * src[y * w + sx] as f64
                    })
                    .sum();
            }
        }
        let dst = out.plane_mut(ci);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                        k * tmp[sy * w + x]
                    })
                    .sum::<f64>() as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::warp;

    #[test]
    fn static_scene_has_identical_frames_and_zero_flow() {
        let s = make_scene(&SceneParams::new(3, 24, 24, 3)).unwrap();
        assert_eq!(s.frames[0], s.frames[1]);
        assert_eq!(s.frames[1], s.frames[2]);
        assert!(s.flows.iter().all(|f| *f == FlowField::zeros(24, 24)));
    }

    #[test]
    fn translation_flow_is_uniform_velocity() {
        let s = make_scene(&SceneParams::new(3, 16, 20, 3).with_velocity(2.0, 0.0)).unwrap();
        assert_eq!(s.flows.len(), 2);
        for f in &s.flows {
            assert_eq!(*f, FlowField::uniform(16, 20, 2.0, 0.0));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let mut p = SceneParams::new(11, 20, 20, 3).with_velocity(0.7, -0.4);
        p.motion.jitter = 0.3;
        assert_eq!(make_scene(&p).unwrap(), make_scene(&p).unwrap());
    }

    #[test]
    fn drift_flow_is_consistent_with_frames() {
        let mut p = SceneParams::new(5, 48, 48, 2).with_velocity(0.5, 0.25);
        p.motion.drift = [0.01, 0.0, 0.0, 0.01];
        let s = make_scene(&p).unwrap();
        let back = warp(&s.frames[1], &s.flows[0]).unwrap();
        let inner = |t: &Tensor| t.crop(6, 6, 36, 36).unwrap();
        let err = inner(&back).sub(&inner(&s.frames[0])).unwrap();
        let mean_abs = err.data().iter().map(|v| v.abs() as f64).sum::<f64>() / err.len() as f64;
        assert!(mean_abs < 5e-3, "mean abs {mean_abs}");
    }

    #[test]
    fn identity_degradation_is_box_downsampling() {
        let s = make_scene(&SceneParams::new(1, 64, 64, 2)).unwrap();
        let pair = degrade(&s, &DegradeParams::identity(4)).unwrap();
        assert_eq!(pair.lr[0], box_downsample(&s.frames[0], 4).unwrap());
        assert_eq!(pair.hr[0], s.frames[0]);
    }

    #[test]
    fn focal_crop_sets_lr_extent() {
        let s = make_scene(&SceneParams::new(1, 160, 200, 1)).unwrap();
        let d = DegradeParams {
            misalign: (0.75, -1.25),
            ..DegradeParams::default()
        };
        let pair = degrade(&s, &d).unwrap();
        let (lh, lw) = (libm::roundf(0.58 * 40.0) as usize, libm::roundf(0.58 * 50.0) as usize);
        assert_eq!(pair.lr[0].dims(), &[3, lh, lw]);
        assert_eq!(pair.hr[0].dims(), &[3, 4 * lh, 4 * lw]);
        assert_eq!(pair.degrade.misalign, (0.75, -1.25));
    }

    #[test]
    fn tiny_crop_is_rejected() {
        let s = make_scene(&SceneParams::new(1, 16, 16, 1)).unwrap();
        assert!(matches!(
            degrade(&s, &DegradeParams::default()),
            Err(Error::TooSmall { .. })
        ));
    }
}
