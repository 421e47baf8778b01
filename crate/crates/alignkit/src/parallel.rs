//! Multi-threaded driver for the super-resolution pipeline.
//!
//! Work is split only where the sequential path has no data dependence
//! (per-frame features, the two propagation directions, per-frame output), so
//! results are bit-identical to `alignkit_core::pipeline::vsr_forward` for any
//! thread count.

use alignkit_core::pipeline::{check_inputs, features, propagate, render_frame, Direction};
use alignkit_core::pipeline::{PipelineConfig, PipelineWeights};
use alignkit_core::tensor::Tensor;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "ALIGNKIT_THREADS";

/// Thread count from `ALIGNKIT_THREADS`, capped at the available parallelism.
/// Unset means all available threads.
pub fn threads_from_env() -> Result<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(available),
        Err(e) => Err(Error::Config(format!("{THREADS_ENV}: {e}"))),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(available)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {s:?}"))),
        },
    }
}

pub fn pool(threads: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))
}

/// Same contract as the sequential forward pass, run on `pool`.
pub fn vsr_forward(pool: &ThreadPool, seq: &[Tensor], w: &PipelineWeights, cfg: &PipelineConfig) -> Result<Vec<Tensor>> {
    check_inputs(seq, w, cfg)?;
    pool.install(|| {
        let feats = seq.par_iter().map(|x| features(x, w)).collect::<Result<Vec<_>, _>>()?;
        let (hb, hf) = rayon::join(
            || propagate(seq, &feats, Direction::Backward, w, cfg),
            || propagate(seq, &feats, Direction::Forward, w, cfg),
        );
        let (hb, hf) = (hb?, hf?);
        (0..seq.len())
            .into_par_iter()
            .map(|i| render_frame(&seq[i], &hf[i], &hb[i], w, cfg.scale))
            .collect::<Result<Vec<_>, _>>()
            .map_err(Error::from)
    })
}
