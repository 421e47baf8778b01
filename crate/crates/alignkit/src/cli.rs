//! The `alignkit` command line. Every subcommand prints a JSON report on
//! stdout that echoes its arguments and the wall-clock time.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use alignkit_core::align::AlignWeights;
use alignkit_core::bench::{ablation, deform_fit_config, Bench, BenchConfig};
use alignkit_core::fit::{FitConfig, FitResult, ObjectiveKind};
use alignkit_core::flow::FlowEstimatorConfig;
use alignkit_core::gradcheck::{check_deform_mask_grad, check_warp_flow_grad, GradCheck};
use alignkit_core::metrics::{psnr, ssim};
use alignkit_core::pipeline::{PipelineConfig, PipelineWeights};
use alignkit_core::rectify::{align_to_flow, color_correct, masked_l1, position_flow, rectify_target};
use alignkit_core::sample::warp;
use alignkit_core::synth::{degrade, make_scene, DegradeParams, PairedSequence, SceneParams};
use alignkit_core::tensor::{FlowField, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::dataset::{read_dataset, write_dataset, write_json};
use crate::error::{io_err, Error, Result};
use crate::{archive, parallel, pnm, vten};

/// Largest relative error the gradient check accepts.
pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "alignkit", version, about = "Feature alignment for video super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene and write a paired low/high-resolution dataset.
    Synth(SynthArgs),
    /// Measure flow and alignment error on a dataset's low-resolution pairs.
    AlignEval(AlignEvalArgs),
    /// Rectify each high-resolution frame onto its low-resolution input.
    Rectify(RectifyArgs),
    /// Super-resolve a dataset or a VTEN frame stack.
    Sr(SrArgs),
    /// Fit alignment weights on the built-in synthetic bench.
    Fit(FitArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Write a pipeline weight archive.
    InitWeights(InitWeightsArgs),
}

fn parse_pair(s: &str) -> std::result::Result<[f32; 2], String> {
    let v = parse_floats(s)?;
    <[f32; 2]>::try_from(v.as_slice()).map_err(|_| format!("expected two comma-separated numbers, got {s:?}"))
}

fn parse_triple(s: &str) -> std::result::Result<[f32; 3], String> {
    match *parse_floats(s)?.as_slice() {
        [v] => Ok([v; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected one or three comma-separated numbers, got {s:?}")),
    }
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f32>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Epe,
    MaskedL1,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Low-resolution frame size (square).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// Content motion per frame in high-resolution pixels, `vx,vy`.
    #[arg(long, default_value = "1.5,0.5", value_parser = parse_pair, allow_hyphen_values = true)]
    pub velocity: [f32; 2],
    /// Standard deviation of per-frame camera jitter in high-resolution pixels.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f32,
    /// High-resolution displacement relative to the low-resolution view, `dx,dy`.
    #[arg(long, default_value = "0,0", value_parser = parse_pair, allow_hyphen_values = true)]
    pub misalign: [f32; 2],
    /// Low-resolution colour gain, one value or `r,g,b`.
    #[arg(long, default_value = "1", value_parser = parse_triple)]
    pub gain: [f32; 3],
    #[arg(long, default_value = "0", value_parser = parse_triple, allow_hyphen_values = true)]
    pub offset: [f32; 3],
    #[arg(long, default_value_t = 0.0)]
    pub noise: f32,
    #[arg(long, default_value_t = 0.0)]
    pub blur: f32,
    /// Fraction of the field of view kept by the low-resolution centre crop.
    #[arg(long, default_value_t = 0.58)]
    pub focal_crop: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AlignEvalArgs {
    pub dataset: PathBuf,
    /// Also report the base-flow and residual-flow-only rows.
    #[arg(long)]
    pub ablate: bool,
    /// Alignment weight archive; without it weights are fitted on the dataset.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Objective evaluations per fitting stage when no weights are given.
    #[arg(long, default_value_t = 2000)]
    pub fit_budget: usize,
    /// Bias subtracted from every base flow, `dx,dy`.
    #[arg(long, default_value = "2,0", value_parser = parse_pair, allow_hyphen_values = true)]
    pub bias: [f32; 2],
    /// Border excluded from the error measurements.
    #[arg(long, default_value_t = 8)]
    pub margin: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the fitted weights to this archive directory.
    #[arg(long)]
    pub save_weights: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RectifyArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SrArgs {
    /// Dataset directory or VTEN file of shape `(T, 3, H, W)` or `(3, H, W)`.
    pub input: PathBuf,
    /// Pipeline weight archive; without it the zero network (bilinear) is used.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long, default_value_t = 2000)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `epe` fits the residual-flow heads, `masked-l1` the deformable head.
    #[arg(long, value_enum, default_value_t = Objective::Epe)]
    pub objective: Objective,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct InitWeightsArgs {
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// All-zero weights, for which the pipeline reduces to bilinear upsampling.
    #[arg(long)]
    pub zero: bool,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 on a runtime failure and 2 on a
/// usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(report) => {
            // A closed stdout (say, piped into `head`) is not a failure.
            let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&report).expect("report serialises"));
            0
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            1
        }
    }
}

pub fn execute(cmd: &Command) -> Result<Value> {
    let start = Instant::now();
    let (config, mut report) = match cmd {
        Command::Synth(a) => (json!(a), synth(a)?),
        Command::AlignEval(a) => (json!(a), align_eval(a)?),
        Command::Rectify(a) => (json!(a), rectify(a)?),
        Command::Sr(a) => (json!(a), sr(a)?),
        Command::Fit(a) => (json!(a), fit(a)?),
        Command::Gradcheck(a) => (json!(a), gradcheck(a)?),
        Command::InitWeights(a) => (json!(a), init_weights(a)?),
    };
    report["config"] = config;
    report["wall_clock_s"] = json!(start.elapsed().as_secs_f64());
    if let Some(out) = report_dir(cmd) {
        write_json(&out.join("report.json"), &report)?;
    }
    if report.get("pass") == Some(&json!(false)) {
        return Err(Error::Config(format!("check failed: {report}")));
    }
    Ok(report)
}

fn report_dir(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Rectify(a) => Some(&a.out),
        Command::Sr(a) => Some(&a.out),
        _ => None,
    }
}

/// Smallest uncropped high-resolution extent whose crop is `lr` pixels wide.
fn hr_extent_for(lr: usize, d: &DegradeParams) -> Result<usize> {
    let upper = (lr as f32 / d.focal_crop).ceil() as usize * d.scale + 2 * d.scale;
    (lr * d.scale..=upper)
        .find(|&e| d.lr_extent(e) == lr)
        .ok_or_else(|| Error::Config(format!("no frame size yields a {lr}-pixel crop at focal crop {}", d.focal_crop)))
}

fn synth(a: &SynthArgs) -> Result<Value> {
    let d = DegradeParams {
        focal_crop: a.focal_crop,
        scale: a.scale,
        blur_sigma: a.blur,
        noise_sigma: a.noise,
        gain: a.gain,
        offset: a.offset,
        misalign: (a.misalign[0], a.misalign[1]),
        seed: a.seed,
        quantize: true,
    };
    d.validate()?;
    if a.frames == 0 {
        return Err(Error::Config("--frames must be at least 1".into()));
    }
    let extent = hr_extent_for(a.size, &d)?;
    let mut scene = SceneParams::new(a.seed, extent, extent, a.frames).with_velocity(a.velocity[0], a.velocity[1]);
    scene.motion.jitter = a.jitter;
    let seq = degrade(&make_scene(&scene)?, &d)?;
    write_dataset(&seq, &a.out)?;
    Ok(json!({
        "frames": seq.frames(),
        "scene_extent": extent,
        "lr_size": seq.lr[0].dims()[1..],
        "hr_size": seq.hr[0].dims()[1..],
    }))
}

fn lr_pairs(seq: &PairedSequence) -> Result<Vec<(Tensor, Tensor, FlowField)>> {
    if seq.frames() < 2 {
        return Err(Error::Config("alignment needs at least two frames".into()));
    }
    Ok((0..seq.frames() - 1)
        .map(|t| (seq.lr[t].clone(), seq.lr[t + 1].clone(), seq.flows[t].clone()))
        .collect())
}

fn trace_summary(r: &FitResult) -> Value {
    json!({
        "initial": r.trace.first(),
        "best": r.best,
        "evaluations": r.evaluations,
    })
}

fn align_eval(a: &AlignEvalArgs) -> Result<Value> {
    let seq = read_dataset(&a.dataset)?;
    let mut cfg = BenchConfig {
        seed: a.seed,
        bias: (a.bias[0], a.bias[1]),
        margin: a.margin,
        ..BenchConfig::default()
    };
    let loaded = match &a.weights {
        Some(dir) => {
            let (w, channels) = archive::load_align(dir, &mut cfg.align)?;
            if channels != 3 {
                return Err(Error::Config(format!("alignment weights are for {channels} channels, frames have 3")));
            }
            Some(w)
        }
        None => None,
    };
    let bench = Bench::from_frames(cfg, lr_pairs(&seq)?)?;
    let mut fitting = Value::Null;
    let w = match loaded {
        Some(w) => w,
        None => {
            let mut w = bench.init_weights(a.seed);
            let fc = FitConfig {
                budget: a.fit_budget,
                seed: a.seed,
                ..FitConfig::default()
            };
            let res = bench.fit_resflow(&mut w.resflow, &fc)?;
            let dfc = FitConfig {
                budget: a.fit_budget,
                ..deform_fit_config(a.seed)
            };
            let def = bench.fit_deform(&mut w, &dfc)?;
            fitting = json!({
                "resflow_levels": res.iter().map(trace_summary).collect::<Vec<_>>(),
                "deform": trace_summary(&def),
            });
            w
        }
    };
    if let Some(dir) = &a.save_weights {
        archive::save_align(dir, &w, 3, &bench.cfg.align)?;
    }
    let base_epe = bench.base_epe()?;
    let refined_epe = bench.refined_epe(&w.resflow)?;
    let rows = if a.ablate {
        let ab = ablation(&bench, &w)?;
        json!([
            { "row": "base", "epe": base_epe, "alignment_error": ab.base },
            { "row": "+resflow", "epe": refined_epe, "alignment_error": ab.resflow },
            { "row": "+both", "epe": refined_epe, "alignment_error": ab.both },
        ])
    } else {
        json!([{ "row": "+both", "epe": refined_epe, "alignment_error": bench.alignment_error(&w, true, true)? }])
    };
    Ok(json!({ "pairs": bench.pairs.len(), "rows": rows, "fitting": fitting }))
}

/// `gain · hr + offset` with the misalignment undone: what a perfectly
/// rectified target looks like.
pub fn true_target(hr: &Tensor, d: &DegradeParams) -> Result<Tensor> {
    let (_, h, w) = hr.chw("true_target")?;
    let aligned = warp(hr, &FlowField::uniform(h, w, d.misalign.0, d.misalign.1))?;
    let mut out = aligned;
    for c in 0..3 {
        let (g, o) = (d.gain[c], d.offset[c]);
        for v in out.plane_mut(c) {
            *v = (g * *v + o).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

fn rectify(a: &RectifyArgs) -> Result<Value> {
    let seq = read_dataset(&a.dataset)?;
    let r = seq.scale();
    let flow_cfg = FlowEstimatorConfig::default();
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut sums = [0.0f64; 4];
    let mut frames = Vec::with_capacity(seq.frames());
    for t in 0..seq.frames() {
        let (x, y) = (&seq.lr[t], &seq.hr[t]);
        let target = true_target(y, &seq.degrade)?;
        let both = rectify_target(x, y, r, &flow_cfg)?;
        let colour = color_correct(x, y, r)?;
        let (pos_flow, _) = position_flow(x, y, r, &flow_cfg)?;
        let (position, _) = align_to_flow(y, &pos_flow, r)?;
        let m = &both.mask;
        let row = [
            masked_l1(y, &target, m)?,
            masked_l1(&colour, &target, m)?,
            masked_l1(&position, &target, m)?,
            masked_l1(&both.y_w, &target, m)?,
        ];
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
        pnm::save(&a.out.join(format!("y_w_{t:04}.ppm")), &both.y_w)?;
        pnm::save(&a.out.join(format!("mask_{t:04}.pgm")), m)?;
        vten::save(&a.out.join(format!("flow_{t:04}.vten")), both.flow.as_tensor())?;
        frames.push(json!({
            "frame": t,
            "none": row[0], "color": row[1], "position": row[2], "both": row[3],
            "mean_flow": both.flow.mean(),
            "low_texture": both.low_texture,
        }));
    }
    let n = seq.frames() as f64;
    Ok(json!({
        "metric": "masked_l1 against the colour-matched, realigned high-resolution frame",
        "rows": [
            { "row": "none", "error": sums[0] / n },
            { "row": "color", "error": sums[1] / n },
            { "row": "position", "error": sums[2] / n },
            { "row": "both", "error": sums[3] / n },
        ],
        "frames": frames,
    }))
}

/// Splits a `(T, 3, H, W)` or `(3, H, W)` tensor into frames.
fn unstack(t: Tensor, path: &Path) -> Result<Vec<Tensor>> {
    match *t.dims() {
        [3, _, _] => Ok(vec![t]),
        [n, 3, h, w] => {
            let frame = 3 * h * w;
            Ok((0..n)
                .map(|i| Tensor::new(&[3, h, w], t.data()[i * frame..(i + 1) * frame].to_vec()).expect("extents match"))
                .collect())
        }
        _ => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected (T, 3, H, W) or (3, H, W), got {:?}", t.dims()),
        }),
    }
}

fn sr(a: &SrArgs) -> Result<Value> {
    let (frames, refs) = if a.input.is_dir() {
        let seq = read_dataset(&a.input)?;
        (seq.lr, Some(seq.hr))
    } else {
        (unstack(vten::load(&a.input)?, &a.input)?, None)
    };
    let (w, cfg) = match &a.weights {
        Some(dir) => {
            let (w, cfg) = archive::load_pipeline(dir)?;
            if let Some(s) = a.scale.filter(|&s| s != cfg.scale) {
                return Err(Error::Config(format!("--scale {s} disagrees with the archived scale {}", cfg.scale)));
            }
            (w, cfg)
        }
        None => {
            let cfg = PipelineConfig::new(a.scale.unwrap_or(4));
            cfg.validate()?;
            (PipelineWeights::zeros(&cfg)?, cfg)
        }
    };
    let threads = parallel::threads_from_env()?;
    let out = parallel::vsr_forward(&parallel::pool(threads)?, &frames, &w, &cfg)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    for (t, f) in out.iter().enumerate() {
        pnm::save(&a.out.join(format!("{t:04}.ppm")), f)?;
    }
    let refs = refs.filter(|r| r.first().map(|f| f.dims()) == out.first().map(|f| f.dims()));
    let metrics = match refs {
        Some(refs) => {
            let per_frame = out
                .iter()
                .zip(&refs)
                .map(|(o, r)| Ok((psnr(o, r)?, ssim(o, r)?)))
                .collect::<Result<Vec<_>>>()?;
            let n = per_frame.len() as f64;
            json!({
                "per_frame": per_frame.iter().map(|(p, s)| json!({ "psnr": p, "ssim": s })).collect::<Vec<_>>(),
                "mean_psnr": per_frame.iter().map(|m| m.0).sum::<f64>() / n,
                "mean_ssim": per_frame.iter().map(|m| m.1).sum::<f64>() / n,
            })
        }
        None => Value::Null,
    };
    Ok(json!({
        "frames": out.len(),
        "scale": cfg.scale,
        "threads": threads,
        "output_size": out[0].dims()[1..],
        "metrics": metrics,
    }))
}

fn fit(a: &FitArgs) -> Result<Value> {
    let bench = Bench::new(BenchConfig {
        seed: a.seed,
        ..BenchConfig::default()
    })?;
    let mut w: AlignWeights = bench.init_weights(a.seed);
    let (before, after, results) = match a.objective {
        Objective::Epe => {
            let before = bench.refined_epe(&w.resflow)?;
            let fc = FitConfig {
                budget: a.budget,
                seed: a.seed,
                objective: ObjectiveKind::Epe,
                ..FitConfig::default()
            };
            let res = bench.fit_resflow(&mut w.resflow, &fc)?;
            (before, bench.refined_epe(&w.resflow)?, res)
        }
        Objective::MaskedL1 => {
            let before = bench.alignment_error(&w, true, true)?;
            let fc = FitConfig {
                budget: a.budget,
                ..deform_fit_config(a.seed)
            };
            let res = bench.fit_deform(&mut w, &fc)?;
            (before, bench.alignment_error(&w, true, true)?, vec![res])
        }
    };
    if let Some(dir) = &a.out {
        archive::save_align(dir, &w, 3, &bench.cfg.align)?;
    }
    Ok(json!({
        "objective": a.objective,
        "before": before,
        "after": after,
        "stages": results.iter().map(|r| json!({ "trace": r.trace, "best": r.best, "evaluations": r.evaluations })).collect::<Vec<_>>(),
    }))
}

fn grad_json(c: &GradCheck) -> Value {
    json!({
        "name": c.name,
        "points": c.points,
        "max_rel_err": c.max_rel_err,
        "mean_rel_err": c.mean_rel_err,
    })
}

fn gradcheck(a: &GradcheckArgs) -> Result<Value> {
    let checks = [check_warp_flow_grad(a.points, a.seed)?, check_deform_mask_grad(a.points, a.seed)?];
    let pass = checks.iter().all(|c| c.max_rel_err <= GRAD_TOLERANCE);
    Ok(json!({
        "tolerance": GRAD_TOLERANCE,
        "checks": checks.iter().map(grad_json).collect::<Vec<_>>(),
        "pass": pass,
    }))
}

fn init_weights(a: &InitWeightsArgs) -> Result<Value> {
    let cfg = PipelineConfig::new(a.scale);
    cfg.validate()?;
    let w = if a.zero {
        PipelineWeights::zeros(&cfg)?
    } else {
        PipelineWeights::random(&cfg, a.seed)?
    };
    archive::save_pipeline(&a.out, &w, &cfg)?;
    Ok(json!({ "parameters": w.param_count(), "scale": cfg.scale }))
}
