//! Derivative-free fitting by simultaneous-perturbation stochastic
//! approximation.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::synth::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Epe,
    MaskedL1,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    /// Objective evaluations, including the initial one.
    pub budget: usize,
    /// Perturbation size `c` of the first iteration.
    pub perturbation: f64,
    /// Largest per-parameter move of any iteration; the gain `a` is
    /// calibrated from the first gradient estimate to reach it.
    pub step: f64,
    /// Gain decay exponents (`a_k = a / (k + 1 + A)^alpha`,
    /// `c_k = c / (k + 1)^gamma`).
    pub alpha: f64,
    pub gamma: f64,
    /// Stability constant `A` as a fraction of the iteration count.
    pub stability: f64,
    pub objective: ObjectiveKind,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            budget: 2000,
            perturbation: 0.01,
            step: 0.05,
            alpha: 0.602,
            gamma: 0.101,
            stability: 0.1,
            objective: ObjectiveKind::Epe,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(invalid("FitConfig", "budget must be at least 1"));
        }
        if !(self.perturbation > 0.0 && self.step > 0.0) {
            return Err(invalid("FitConfig", "perturbation and step must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// Best point seen.
    pub params: Vec<f32>,
    pub best: f64,
    /// Best-so-far loss: the initial evaluation, one entry per iteration and
    /// one for the final iterate.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

/// Minimises `objective` from `x0`. Each iteration evaluates an antithetic
/// pair `x ± c_k·Δ` with Rademacher `Δ`; those points and the final iterate
/// compete for the returned best.
pub fn spsa(mut objective: impl FnMut(&[f32]) -> f64, x0: &[f32], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let f0 = objective(x0);
    let mut trace = vec![f0];
    if !f0.is_finite() {
        return Err(Error::ObjectiveNotFinite { trace });
    }
    // One evaluation is kept back for the final iterate.
    let iters = cfg.budget.saturating_sub(2) / 2;
    let big_a = cfg.stability * iters as f64;
    let mut rng = stream_rng(cfg.seed, 0x5159_4100);
    let d = x0.len();
    let mut x: Vec<f64> = x0.iter().map(|&v| v as f64).collect();
    let mut best = (f0, x0.to_vec());
    let mut gain: Option<f64> = None;
    let mut delta = vec![0.0f64; d];
    let (mut plus, mut minus) = (vec![0.0f32; d], vec![0.0f32; d]);
    for k in 0..iters {
        let ck = cfg.perturbation / libm::pow(k as f64 + 1.0, cfg.gamma);
        for (i, di) in delta.iter_mut().enumerate() {
            *di = if rng.random::<bool>() { 1.0 } else { -1.0 };
            plus[i] = (x[i] + ck * *di) as f32;
            minus[i] = (x[i] - ck * *di) as f32;
        }
        let (fp, fm) = (objective(&plus), objective(&minus));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::ObjectiveNotFinite { trace });
        }
        if fp < best.0 {
            best = (fp, plus.clone());
        }
        if fm < best.0 {
            best = (fm, minus.clone());
        }
        trace.push(best.0);
        let slope = (fp - fm) / (2.0 * ck);
        let a = *gain.get_or_insert_with(|| {
            if slope == 0.0 {
                0.0
            } else {
                cfg.step * libm::pow(1.0 + big_a, cfg.alpha) / slope.abs()
            }
        });
        let ak = a / libm::pow(k as f64 + 1.0 + big_a, cfg.alpha);
        // Δ is ±1, so dividing by it equals multiplying. Moves are capped at
        // `step` so one noisy slope cannot throw the iterate away.
        let mv = (ak * slope).clamp(-cfg.step, cfg.step);
        for (xi, di) in x.iter_mut().zip(&delta) {
            *xi -= mv * di;
        }
    }
    let mut evaluations = 1 + 2 * iters;
    if cfg.budget > 1 {
        let last: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let fl = objective(&last);
        evaluations += 1;
        if !fl.is_finite() {
            return Err(Error::ObjectiveNotFinite { trace });
        }
        if fl < best.0 {
            best = (fl, last);
        }
        trace.push(best.0);
    }
    Ok(FitResult {
        params: best.1,
        best: best.0,
        trace,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(target: &[f32]) -> impl Fn(&[f32]) -> f64 + '_ {
        move |w: &[f32]| w.iter().zip(target).map(|(a, b)| ((a - b) as f64).powi(2)).sum()
    }

    #[test]
    fn budget_one_returns_initial_point() {
        let t = [1.0f32; 3];
        let r = spsa(quad(&t), &[0.0; 3], &FitConfig { budget: 1, ..Default::default() }).unwrap();
        assert_eq!(r.params, vec![0.0; 3]);
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn quadratic_converges() {
        let t = [0.9f32, -0.4, 0.3, 1.2, -1.0, 0.05, 0.6, -0.7];
        let cfg = FitConfig::default();
        let r = spsa(quad(&t), &[0.0; 8], &cfg).unwrap();
        assert!(r.best <= 0.01 * r.trace[0], "{} vs {}", r.best, r.trace[0]);
        assert!(r.trace.windows(2).all(|p| p[1] <= p[0]));
        assert_eq!(r, spsa(quad(&t), &[0.0; 8], &cfg).unwrap());
    }

    #[test]
    fn non_finite_aborts_with_trace() {
        let mut calls = 0;
        let r = spsa(
            |_| {
                calls += 1;
                if calls > 3 {
                    f64::NAN
                } else {
                    1.0
                }
            },
            &[0.0; 2],
            &FitConfig::default(),
        );
        match r {
            Err(Error::ObjectiveNotFinite { trace }) => assert_eq!(trace.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
