//! Losses, batched gradients and the epoch loop.

pub mod data;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::integrators::Trajectory;
use crate::linalg::Matrix;
use crate::models::{NeuralPredictor, ParamIds, Predictor};

pub use data::{
    generate_trajectories, read_dataset, write_dataset, DatasetSpec, Horizon, InitialSampler,
    Manifest, Split, TrajectoryDataset, WindowSet,
};
pub use optim::{
    fit_exponential, huber, pfl_prune, AdamW, AdamWConfig, ExpFit,
    LrSchedule, PruneDecision, PrunerConfig,
};

/// `huber(F(x_k) − x_{k+1})`.
pub fn loss_one_step<P: Predictor + ?Sized>(
    predictor: &P,
    x_k: &[f64],
    x_next: &[f64],
    delta: f64,
) -> Result<f64> {
    let y = predictor.step(x_k)?;
    Ok(huber(&residual(&y, x_next)?, delta))
}

/// `(1/W) Σᵢ huber(x̂_{k+i} − x_{k+i})` over an autoregressive rollout.
pub fn loss_ahnn<P: Predictor + ?Sized>(
    predictor: &P,
    x_k: &[f64],
    targets: &[Vec<f64>],
    delta: f64,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    let mut x = x_k.to_vec();
    let mut total = 0.0;
    for (i, target) in targets.iter().enumerate() {
        x = predictor.step(&x).map_err(|e| e.at_step(i))?;
        total += huber(&residual(&x, target)?, delta);
    }
    Ok(total / targets.len() as f64)
}

fn residual(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "prediction of length {} against target of length {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// A model viewed as a map on normalized states.
pub struct Normalized<'a>(pub &'a NeuralPredictor);

impl Predictor for Normalized<'_> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn dt(&self) -> f64 {
        self.0.dt
    }

    fn step_batch(&self, xs: &Matrix) -> Result<Matrix> {
        Ok(self.0.step_normalized(xs))
    }
}

/// Window loss of rows `ids`, scaled by `scale`, as a 1 x 1 node.
fn window_loss_graph(
    model: &NeuralPredictor,
    g: &mut Graph,
    p: &ParamIds,
    windows: &WindowSet,
    ids: &[usize],
    delta: f64,
    scale: f64,
) -> NodeId {
    let rows = |i: usize| -> Matrix {
        let r: Vec<&[f64]> = ids.iter().map(|&w| windows.state(w, i)).collect();
        Matrix::from_rows(&r)
    };
    let mut z = g.leaf(rows(0));
    let mut terms = Vec::with_capacity(windows.window);
    for i in 1..=windows.window {
        z = model.step_graph(g, p, z);
        let target = g.leaf(rows(i));
        let r = g.sub(z, target);
        terms.push(g.huber_sum(r, delta, scale));
    }
    g.sum_scalars(&terms)
}

/// Mean window loss over `ids` and its gradient in
/// [`MlpParams::flatten`](crate::models::MlpParams::flatten) order.
///
/// Rows are processed in chunks of `chunk_rows` (in parallel when a pool is
/// available) and reduced in chunk order, so the result does not depend on
/// the thread count.
pub fn batch_loss_and_grad(
    model: &NeuralPredictor,
    windows: &WindowSet,
    ids: &[usize],
    delta: f64,
    chunk_rows: usize,
) -> Result<(f64, Vec<f64>)> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / (windows.window * ids.len()) as f64;
    let parts: Vec<Result<(f64, Vec<f64>)>> = ids
        .par_chunks(chunk_rows.max(1))
        .map(|chunk| {
            let mut g = Graph::new();
            let p = model.net.leaves(&mut g);
            let loss = window_loss_graph(model, &mut g, &p, windows, chunk, delta, scale);
            let grads = g.backward(loss)?;
            Ok((g.value(loss)[(0, 0)], p.flat_grad(&g, &grads)))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.net.num_params()];
    for part in parts {
        let (l, gr) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&gr) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Mean window loss over every window, without gradients.
pub fn mean_window_loss(
    model: &NeuralPredictor,
    windows: &WindowSet,
    delta: f64,
    chunk_rows: usize,
) -> f64 {
    if windows.is_empty() {
        return f64::NAN;
    }
    let ids: Vec<usize> = (0..windows.len()).collect();
    let scale = 1.0 / (windows.window * ids.len()) as f64;
    let parts: Vec<f64> = ids
        .par_chunks(chunk_rows.max(1))
        .map(|chunk| {
            let mut g = Graph::new();
            let p = model.net.leaves(&mut g);
            let loss = window_loss_graph(model, &mut g, &p, windows, chunk, delta, scale);
            g.value(loss)[(0, 0)]
        })
        .collect();
    parts.iter().sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_lr_inf")]
    pub lr_inf: f64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default = "d_delta")]
    pub huber_delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pruner: Option<PrunerConfig>,
    /// Rows per gradient task inside a batch.
    #[serde(default = "d_chunk")]
    pub chunk_rows: usize,
}

fn d_batch() -> usize {
    256
}
fn d_epochs() -> usize {
    250
}
fn d_lr0() -> f64 {
    1e-3
}
fn d_lr_inf() -> f64 {
    1e-5
}
fn d_delta() -> f64 {
    1.0
}
fn d_chunk() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: d_batch(),
            epochs: d_epochs(),
            lr0: d_lr0(),
            lr_inf: d_lr_inf(),
            adamw: AdamWConfig::default(),
            huber_delta: d_delta(),
            seed: 0,
            pruner: None,
            chunk_rows: d_chunk(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr0: self.lr0,
            lr_inf: self.lr_inf,
            epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.chunk_rows == 0 {
            return Err(Error::ConfigInvalid(
                "batch_size and chunk_rows must be at least 1".into(),
            ));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "huber_delta {} must be positive",
                self.huber_delta
            )));
        }
        if let Some(p) = &self.pruner {
            if p.fit_epochs < 3 || p.horizon == 0 || p.threshold.is_nan() {
                return Err(Error::ConfigInvalid(format!("invalid pruner {p:?}")));
            }
        }
        self.adamw.validate()?;
        self.schedule().validate()
    }
}

/// Per-epoch losses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub lr: Vec<f64>,
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub pruned_at: Option<usize>,
}

impl History {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "lr", "train_loss", "val_loss"])?;
        for e in 0..self.train.len() {
            w.write_record([
                e.to_string(),
                self.lr[e].to_string(),
                self.train[e].to_string(),
                self.val[e].to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.to_string()))
    }
}

/// Trains `model` with its own window length and returns the parameters
/// with the lowest validation loss.
pub fn train(
    mut model: NeuralPredictor,
    train_set: &[Trajectory],
    val_set: &[Trajectory],
    config: &TrainConfig,
) -> Result<(NeuralPredictor, History)> {
    config.validate()?;
    model.validate()?;
    let w = model.window;
    let train_ws = WindowSet::new(train_set, &model.norm, w);
    let val_ws = WindowSet::new(val_set, &model.norm, w);
    let mut history = History::default();
    if config.epochs == 0 {
        return Ok((model, history));
    }
    if train_ws.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no training windows of length {w}"
        )));
    }
    let schedule = config.schedule();
    let mut theta = model.net.flatten();
    let mut opt = AdamW::new(theta.len(), config.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_ws.len()).collect();
    let mut best = (f64::INFINITY, theta.clone());
    for epoch in 0..config.epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, ids) in order.chunks(config.batch_size).enumerate() {
            let (loss, grad) =
                batch_loss_and_grad(&model, &train_ws, ids, config.huber_delta, config.chunk_rows)?;
            if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            opt.step(&mut theta, &grad, lr)?;
            model.net.set_flat(&theta)?;
            total += loss * ids.len() as f64;
        }
        let train_loss = total / train_ws.len() as f64;
        let val_loss = if val_ws.is_empty() {
            train_loss
        } else {
            mean_window_loss(&model, &val_ws, config.huber_delta, config.chunk_rows)
        };
        log::info!(
            "{} epoch {epoch}: lr {lr:.3e} train {train_loss:.6e} val {val_loss:.6e}",
            model.label()
        );
        history.lr.push(lr);
        history.train.push(train_loss);
        history.val.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, theta.clone());
            history.best_epoch = Some(epoch);
        }
        if let Some(p) = &config.pruner {
            if epoch + 1 == p.fit_epochs {
                if let PruneDecision::Stop { predicted } =
                    pfl_prune(&history.val, p.horizon, p.threshold)
                {
                    log::info!("pruned after epoch {epoch}: predicted loss {predicted:.3e}");
                    history.pruned_at = Some(epoch);
                    break;
                }
            }
        }
    }
    model.net.set_flat(&best.1)?;
    Ok((model, history))
}
