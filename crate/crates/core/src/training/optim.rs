//! Huber loss, AdamW, the learning-rate schedule and the PFL pruner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crate::autodiff::graph::huber_scalar;

/// `Σ ½r²` inside `|r| ≤ δ`, `Σ δ(|r| − ½δ)` outside.
pub fn huber(residual: &[f64], delta: f64) -> f64 {
    residual.iter().map(|&r| huber_scalar(r, delta)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, config: AdamWConfig) -> Self {
        AdamW {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `θ ← θ(1 − lr·λ)`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer for {} parameters got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * c.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

/// `lr(e) = lr_inf + (lr0 − lr_inf)·exp(−e/τ)` with `τ = epochs/5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr_inf: f64,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.lr_inf > 0.0 && self.lr_inf <= self.lr0 && self.lr0.is_finite() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!(
                "learning rates need 0 < lr_inf <= lr0, got {} and {}",
                self.lr_inf, self.lr0
            )))
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let tau = (self.epochs.max(1) as f64) / 5.0;
        self.lr_inf + (self.lr0 - self.lr_inf) * (-(epoch as f64) / tau).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrunerConfig {
    pub fit_epochs: usize,
    pub horizon: usize,
    pub threshold: f64,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        PrunerConfig {
            fit_epochs: 10,
            horizon: 50,
            threshold: f64::INFINITY,
        }
    }
}

/// `ℓ(e) = a·exp(−b·e) + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ExpFit {
    pub fn predict(&self, epoch: f64) -> f64 {
        self.a * (-self.b * epoch).exp() + self.c
    }
}

/// Least-squares fit of `a·e^{−be} + c` to `losses[i]` at epoch `i + 1`.
///
/// For fixed `b` the problem is linear in `(a, c)`; `b` is found by a log
/// grid followed by golden-section refinement. When the `(a, c)` system is
/// degenerate the fit falls back to a log-linear `a·e^{−be}`.
pub fn fit_exponential(losses: &[f64]) -> Result<ExpFit> {
    if losses.len() < 3 {
        return Err(Error::FitFailed(format!("{} points are too few", losses.len())));
    }
    if !losses.iter().all(|l| l.is_finite()) {
        return Err(Error::FitFailed("non-finite loss".into()));
    }
    let epochs: Vec<f64> = (1..=losses.len()).map(|e| e as f64).collect();
    let sse = |b: f64| -> Option<(f64, f64, f64)> {
        let (a, c) = linear_ac(&epochs, losses, b)?;
        let s = epochs
            .iter()
            .zip(losses)
            .map(|(e, l)| (a * (-b * e).exp() + c - l).powi(2))
            .sum::<f64>();
        Some((s, a, c))
    };
    let grid: Vec<f64> = (0..=160).map(|i| 10f64.powf(-4.0 + 5.0 * i as f64 / 160.0)).collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, &b) in grid.iter().enumerate() {
        if let Some((s, _, _)) = sse(b) {
            if best.is_none_or(|(_, bs)| s < bs) {
                best = Some((i, s));
            }
        }
    }
    let Some((i, _)) = best else {
        return fit_log_linear(&epochs, losses);
    };
    let (mut lo, mut hi) = (
        grid[i.saturating_sub(1)].ln(),
        grid[(i + 1).min(grid.len() - 1)].ln(),
    );
    let f = |lb: f64| sse(lb.exp()).map_or(f64::INFINITY, |r| r.0);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut x1, mut x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..100 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    let b = (0.5 * (lo + hi)).exp();
    match sse(b) {
        Some((_, a, c)) if a.is_finite() && c.is_finite() => Ok(ExpFit { a, b, c }),
        _ => fit_log_linear(&epochs, losses),
    }
}

fn linear_ac(epochs: &[f64], losses: &[f64], b: f64) -> Option<(f64, f64)> {
    let (mut suu, mut su, mut sul, mut sl) = (0.0, 0.0, 0.0, 0.0);
    let n = epochs.len() as f64;
    for (e, l) in epochs.iter().zip(losses) {
        let u = (-b * e).exp();
        suu += u * u;
        su += u;
        sul += u * l;
        sl += l;
    }
    let det = suu * n - su * su;
    if !(det.abs() > 1e-14 * suu * n) {
        return None;
    }
    let a = (sul * n - su * sl) / det;
    let c = (suu * sl - su * sul) / det;
    Some((a, c))
}

fn fit_log_linear(epochs: &[f64], losses: &[f64]) -> Result<ExpFit> {
    if losses.iter().any(|&l| l <= 0.0) {
        return Err(Error::FitFailed("log-linear fallback needs positive losses".into()));
    }
    let n = epochs.len() as f64;
    let ys: Vec<f64> = losses.iter().map(|l| l.ln()).collect();
    let me = epochs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = epochs.iter().zip(&ys).map(|(e, y)| (e - me) * (y - my)).sum();
    let sxx: f64 = epochs.iter().map(|e| (e - me).powi(2)).sum();
    let slope = sxy / sxx;
    let fit = ExpFit {
        a: (my - slope * me).exp(),
        b: -slope,
        c: 0.0,
    };
    if fit.a.is_finite() && fit.b.is_finite() {
        Ok(fit)
    } else {
        Err(Error::FitFailed("log-linear fit is not finite".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneDecision {
    Continue,
    Stop { predicted: f64 },
}

/// Stops when the fitted curve predicts a loss above `threshold` at epoch
/// `horizon`. A failed fit never stops a run.
pub fn pfl_prune(val_losses: &[f64], horizon: usize, threshold: f64) -> PruneDecision {
    match fit_exponential(val_losses) {
        Ok(fit) => {
            let predicted = fit.predict(horizon as f64);
            if predicted > threshold {
                PruneDecision::Stop { predicted }
            } else {
                PruneDecision::Continue
            }
        }
        Err(e) => {
            log::debug!("pruner fit failed: {e}");
            PruneDecision::Continue
        }
    }
}
