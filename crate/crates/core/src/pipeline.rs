//! Bidirectional recurrent video super-resolution: per-frame encoder,
//! aligned propagation in both temporal directions, a residual
//! channel-attention reconstructor and a pixel-shuffle upsampler with a
//! bilinear skip.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::align::{align, AlignConfig, AlignWeights};
use crate::conv::{global_avg_pool, leaky_relu_inplace, pixel_shuffle, relu_inplace, sigmoid, Conv2d};
use crate::error::{check_dim, invalid, Error, Result};
use crate::synth::stream_rng;
use crate::tensor::Tensor;

/// Width of the propagated hidden state.
pub const FEAT: usize = 64;
/// Residual channel-attention blocks in the reconstructor.
pub const RCAB_BLOCKS: usize = 30;
/// Channel-attention squeeze width (reduction 16).
pub const SQUEEZE: usize = FEAT / 16;
pub const LEAKY_SLOPE: f32 = 0.1;
/// Encoder widths, input first.
pub const ENCODER_WIDTHS: [usize; 6] = [3, 64, 64, 128, 128, 256];
/// Gain applied to the last layer of every residual branch at random init.
const RESIDUAL_GAIN: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    pub scale: usize,
    pub align: AlignConfig,
}

impl PipelineConfig {
    pub fn new(scale: usize) -> Self {
        Self {
            scale,
            align: AlignConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(invalid("PipelineConfig", "scale must be 2 or 4"));
        }
        self.align.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rcab {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// 1 × 1, 64 → 4.
    pub squeeze: Conv2d,
    /// 1 × 1, 4 → 64.
    pub excite: Conv2d,
}

impl Rcab {
    pub fn zeros() -> Self {
        Self {
            conv1: Conv2d::zeros(FEAT, FEAT, 3, 1),
            conv2: Conv2d::zeros(FEAT, FEAT, 3, 1),
            squeeze: Conv2d::zeros(FEAT, SQUEEZE, 1, 1),
            excite: Conv2d::zeros(SQUEEZE, FEAT, 1, 1),
        }
    }

    fn random(rng: &mut impl rand::Rng) -> Self {
        Self {
            conv1: Conv2d::he_normal(FEAT, FEAT, 3, 1, 1.0, rng),
            conv2: Conv2d::he_normal(FEAT, FEAT, 3, 1, RESIDUAL_GAIN, rng),
            squeeze: Conv2d::he_normal(FEAT, SQUEEZE, 1, 1, 1.0, rng),
            excite: Conv2d::he_normal(SQUEEZE, FEAT, 1, 1, 1.0, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = self.conv1.forward(x)?;
        relu_inplace(&mut t);
        let mut t = self.conv2.forward(&t)?;
        let mut s = self.squeeze.forward(&global_avg_pool(&t)?)?;
        relu_inplace(&mut s);
        let s = self.excite.forward(&s)?;
        for (c, &g) in s.data().iter().enumerate() {
            let g = sigmoid(g);
            t.plane_mut(c).iter_mut().for_each(|v| *v *= g);
        }
        x.add(&t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineWeights {
    pub scale: usize,
    /// Five 3 × 3 convs, each followed by ReLU.
    pub encoder: Vec<Conv2d>,
    /// 1 × 1, 256 → 64, bringing encoder features to the hidden width.
    pub bridge: Conv2d,
    /// Backward-in-time branch (aligns the state coming from frame `i + 1`).
    pub align_backward: AlignWeights,
    /// Forward-in-time branch (state from frame `i − 1`).
    pub align_forward: AlignWeights,
    /// Recurrent cells: `concat(f_i, h̄_i)` 128 → 64.
    pub cell_backward: Conv2d,
    pub cell_forward: Conv2d,
    /// 1 × 1, `concat(h^f, h^b)` 128 → 64.
    pub fusion: Conv2d,
    /// 67 → 64.
    pub fuse_input: Conv2d,
    pub rcabs: Vec<Rcab>,
    /// 1 × 1, 64 → 64.
    pub recon_tail: Conv2d,
    /// One 64 → 256 stage per factor of two.
    pub up_stages: Vec<Conv2d>,
    pub hr_conv: Conv2d,
    /// 64 → 3.
    pub last_conv: Conv2d,
}

impl PipelineWeights {
    /// Every weight and bias zero; predictor branches keep their identity
    /// biases, so the alignment heads stay well defined.
    pub fn zeros(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(0, 0);
        let mut w = Self::random(cfg, 0)?;
        let mut zero_all = |_: String, t: &mut Tensor| t.map_inplace(|_| 0.0);
        w.for_each_param_mut(&mut zero_all);
        w.align_backward = zero_align(cfg, &mut rng);
        w.align_forward = zero_align(cfg, &mut rng);
        Ok(w)
    }

    /// He-normal weights from `seed`; last layers of residual branches are
    /// scaled down and alignment branches start at their identity state.
    pub fn random(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, 0);
        let encoder = ENCODER_WIDTHS
            .windows(2)
            .map(|p| Conv2d::he_normal(p[0], p[1], 3, 1, 1.0, &mut rng))
            .collect();
        let bridge = Conv2d::he_normal(256, FEAT, 1, 1, 1.0, &mut rng);
        let align_backward = AlignWeights::new(FEAT, &cfg.align, &mut rng);
        let align_forward = AlignWeights::new(FEAT, &cfg.align, &mut rng);
        let cell_backward = Conv2d::he_normal(2 * FEAT, FEAT, 3, 1, 1.0, &mut rng);
        let cell_forward = Conv2d::he_normal(2 * FEAT, FEAT, 3, 1, 1.0, &mut rng);
        let fusion = Conv2d::he_normal(2 * FEAT, FEAT, 1, 1, 1.0, &mut rng);
        let fuse_input = Conv2d::he_normal(3 + FEAT, FEAT, 3, 1, 1.0, &mut rng);
        let rcabs = (0..RCAB_BLOCKS).map(|_| Rcab::random(&mut rng)).collect();
        let recon_tail = Conv2d::he_normal(FEAT, FEAT, 1, 1, 1.0, &mut rng);
        let up_stages = (0..stages(cfg.scale))
            .map(|_| Conv2d::he_normal(FEAT, 4 * FEAT, 3, 1, 1.0, &mut rng))
            .collect();
        let hr_conv = Conv2d::he_normal(FEAT, FEAT, 3, 1, 1.0, &mut rng);
        let last_conv = Conv2d::he_normal(FEAT, 3, 3, 1, RESIDUAL_GAIN, &mut rng);
        Ok(Self {
            scale: cfg.scale,
            encoder,
            bridge,
            align_backward,
            align_forward,
            cell_backward,
            cell_forward,
            fusion,
            fuse_input,
            rcabs,
            recon_tail,
            up_stages,
            hr_conv,
            last_conv,
        })
    }

    /// Visits every parameter tensor under a stable, unique name.
    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        let conv = |name: String, c: &'a Conv2d, f: &mut dyn FnMut(String, &'a Tensor)| {
            f(format!("{name}.weight"), &c.weight);
            f(format!("{name}.bias"), &c.bias);
        };
        for (i, c) in self.encoder.iter().enumerate() {
            conv(format!("encoder{i}"), c, f);
        }
        conv("bridge".into(), &self.bridge, f);
        self.align_backward.for_each_param("align_backward", f);
        self.align_forward.for_each_param("align_forward", f);
        conv("cell_backward".into(), &self.cell_backward, f);
        conv("cell_forward".into(), &self.cell_forward, f);
        conv("fusion".into(), &self.fusion, f);
        conv("fuse_input".into(), &self.fuse_input, f);
        for (i, r) in self.rcabs.iter().enumerate() {
            conv(format!("rcab{i}.conv1"), &r.conv1, f);
            conv(format!("rcab{i}.conv2"), &r.conv2, f);
            conv(format!("rcab{i}.squeeze"), &r.squeeze, f);
            conv(format!("rcab{i}.excite"), &r.excite, f);
        }
        conv("recon_tail".into(), &self.recon_tail, f);
        for (i, c) in self.up_stages.iter().enumerate() {
            conv(format!("up{i}"), c, f);
        }
        conv("hr_conv".into(), &self.hr_conv, f);
        conv("last_conv".into(), &self.last_conv, f);
    }

    /// Mutable counterpart of [`Self::for_each_param`], in the same order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        fn conv(name: String, c: &mut Conv2d, f: &mut dyn FnMut(String, &mut Tensor)) {
            f(format!("{name}.weight"), &mut c.weight);
            f(format!("{name}.bias"), &mut c.bias);
        }
        for (i, c) in self.encoder.iter_mut().enumerate() {
            conv(format!("encoder{i}"), c, f);
        }
        conv("bridge".into(), &mut self.bridge, f);
        self.align_backward.for_each_param_mut("align_backward", f);
        self.align_forward.for_each_param_mut("align_forward", f);
        conv("cell_backward".into(), &mut self.cell_backward, f);
        conv("cell_forward".into(), &mut self.cell_forward, f);
        conv("fusion".into(), &mut self.fusion, f);
        conv("fuse_input".into(), &mut self.fuse_input, f);
        for (i, r) in self.rcabs.iter_mut().enumerate() {
            conv(format!("rcab{i}.conv1"), &mut r.conv1, f);
            conv(format!("rcab{i}.conv2"), &mut r.conv2, f);
            conv(format!("rcab{i}.squeeze"), &mut r.squeeze, f);
            conv(format!("rcab{i}.excite"), &mut r.excite, f);
        }
        conv("recon_tail".into(), &mut self.recon_tail, f);
        for (i, c) in self.up_stages.iter_mut().enumerate() {
            conv(format!("up{i}"), c, f);
        }
        conv("hr_conv".into(), &mut self.hr_conv, f);
        conv("last_conv".into(), &mut self.last_conv, f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.len());
        n
    }
}

fn zero_align(cfg: &PipelineConfig, rng: &mut impl rand::Rng) -> AlignWeights {
    let mut w = AlignWeights::new(FEAT, &cfg.align, rng);
    for p in w.resflow.iter_mut().chain(core::iter::once(&mut w.deform_head)) {
        for c in p.trunk.iter_mut() {
            c.weight.map_inplace(|_| 0.0);
        }
    }
    w.deform_conv.weight.map_inplace(|_| 0.0);
    w
}

fn stages(scale: usize) -> usize {
    match scale {
        2 => 1,
        _ => 2,
    }
}

/// Five conv + ReLU layers; `(3, H, W)` to `(256, H, W)`.
pub fn encode(x: &Tensor, w: &PipelineWeights) -> Result<Tensor> {
    let (c, _, _) = x.chw("encode")?;
    check_dim("encode", "input channels", 3, c)?;
    let mut t = x.clone();
    for conv in &w.encoder {
        t = conv.forward(&t)?;
        relu_inplace(&mut t);
    }
    Ok(t)
}

/// Encoder followed by the 1 × 1 bridge to the hidden width.
pub fn features(x: &Tensor, w: &PipelineWeights) -> Result<Tensor> {
    w.bridge.forward(&encode(x, w)?)
}

/// `(3, H, W)` frame and `(64, H, W)` propagated feature to `(64, H, W)`.
pub fn reconstruct(x: &Tensor, h_bar: &Tensor, w: &PipelineWeights) -> Result<Tensor> {
    const OP: &str = "reconstruct";
    check_dim(OP, "frame channels", 3, x.chw(OP)?.0)?;
    check_dim(OP, "feature channels", FEAT, h_bar.chw(OP)?.0)?;
    let mut t = w.fuse_input.forward(&Tensor::concat_channels(&[x, h_bar])?)?;
    leaky_relu_inplace(&mut t, LEAKY_SLOPE);
    for r in &w.rcabs {
        t = r.forward(&t)?;
    }
    let mut t = w.recon_tail.forward(&t)?;
    leaky_relu_inplace(&mut t, LEAKY_SLOPE);
    Ok(t)
}

/// `(64, H, W)` to `(3, rH, rW)`, plus the bilinear skip of `x`.
pub fn upsample(h: &Tensor, x: &Tensor, scale: usize, w: &PipelineWeights) -> Result<Tensor> {
    const OP: &str = "upsample";
    if scale != 2 && scale != 4 {
        return Err(invalid(OP, "scale must be 2 or 4"));
    }
    check_dim(OP, "stages", stages(scale), w.up_stages.len())?;
    let mut t = h.clone();
    for stage in &w.up_stages {
        t = pixel_shuffle(&stage.forward(&t)?, 2)?;
        leaky_relu_inplace(&mut t, LEAKY_SLOPE);
    }
    let mut t = w.hr_conv.forward(&t)?;
    leaky_relu_inplace(&mut t, LEAKY_SLOPE);
    let t = w.last_conv.forward(&t)?;
    t.add(&crate::sample::upsample_bilinear(x, scale)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Frame `T − 1` down to frame 0; state comes from `i + 1`.
    Backward,
    /// Frame 0 up to `T − 1`; state comes from `i − 1`.
    Forward,
}

/// Hidden states of one propagation direction, indexed by frame.
pub fn propagate(
    frames: &[Tensor],
    feats: &[Tensor],
    dir: Direction,
    w: &PipelineWeights,
    cfg: &PipelineConfig,
) -> Result<Vec<Tensor>> {
    let t_len = frames.len();
    let (aw, cell) = match dir {
        Direction::Backward => (&w.align_backward, &w.cell_backward),
        Direction::Forward => (&w.align_forward, &w.cell_forward),
    };
    let order: Vec<usize> = match dir {
        Direction::Backward => (0..t_len).rev().collect(),
        Direction::Forward => (0..t_len).collect(),
    };
    let mut hidden: Vec<Option<Tensor>> = vec![None; t_len];
    let mut prev: Option<usize> = None;
    for &i in &order {
        let (_, h, wd) = frames[i].chw("propagate")?;
        let h_bar = match prev {
            None => Tensor::zeros(&[FEAT, h, wd]),
            Some(j) => {
                let h_prev = hidden[j].as_ref().expect("computed earlier");
                align(&frames[j], &frames[i], &feats[j], &feats[i], h_prev, &cfg.align, aw)?.feature
            }
        };
        let mut s = cell.forward(&Tensor::concat_channels(&[&feats[i], &h_bar])?)?;
        leaky_relu_inplace(&mut s, LEAKY_SLOPE);
        hidden[i] = Some(s);
        prev = Some(i);
    }
    Ok(hidden.into_iter().map(|h| h.expect("every frame visited")).collect())
}

/// Output frame `i` from both directions' hidden states.
pub fn render_frame(x: &Tensor, h_f: &Tensor, h_b: &Tensor, w: &PipelineWeights, scale: usize) -> Result<Tensor> {
    let fused = w.fusion.forward(&Tensor::concat_channels(&[h_f, h_b])?)?;
    let h = reconstruct(x, &fused, w)?;
    upsample(&h, x, scale, w)
}

/// Checks a frame sequence: non-empty, equal `(3, H, W)` frames, `H, W ≥ 16`.
pub fn check_sequence(seq: &[Tensor]) -> Result<()> {
    const OP: &str = "vsr_forward";
    let first = seq.first().ok_or(Error::EmptySequence { op: OP })?;
    let (c, h, w) = first.chw(OP)?;
    check_dim(OP, "frame channels", 3, c)?;
    if h.min(w) < 16 {
        return Err(Error::TooSmall {
            op: OP,
            reason: format!("frames are {h}×{w}, need at least 16×16"),
        });
    }
    for f in &seq[1..] {
        first.check_same_dims(OP, f)?;
    }
    Ok(())
}

/// Everything `vsr_forward` checks before doing any work.
pub fn check_inputs(seq: &[Tensor], w: &PipelineWeights, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    check_sequence(seq)?;
    check_dim("vsr_forward", "weight scale", cfg.scale, w.scale)
}

/// Super-resolves every frame of `seq` by `cfg.scale`.
pub fn vsr_forward(seq: &[Tensor], w: &PipelineWeights, cfg: &PipelineConfig) -> Result<Vec<Tensor>> {
    check_inputs(seq, w, cfg)?;
    let feats = seq.iter().map(|x| features(x, w)).collect::<Result<Vec<_>>>()?;
    let hb = propagate(seq, &feats, Direction::Backward, w, cfg)?;
    let hf = propagate(seq, &feats, Direction::Forward, w, cfg)?;
    (0..seq.len())
        .map(|i| render_frame(&seq[i], &hf[i], &hb[i], w, cfg.scale))
        .collect()
}
