//! RMSE, moving averages, energy series and comparison tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub label: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(label: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::GridMismatch(format!(
                "{} times for {} values",
                times.len(),
                values.len()
            )));
        }
        Ok(MetricSeries {
            label: label.into(),
            times,
            values,
        })
    }
}

/// Which state components enter a metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    Positions,
    Momenta,
    All,
    Indices(Vec<usize>),
}

impl Components {
    pub fn indices(&self, dim: usize) -> Vec<usize> {
        match self {
            Components::Positions => (0..dim / 2).collect(),
            Components::Momenta => (dim / 2..dim).collect(),
            Components::All => (0..dim).collect(),
            Components::Indices(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rmse {
    /// RMSE across trajectories and components at each step.
    pub per_step: Vec<f64>,
    /// RMSE over every step, trajectory and component.
    pub scalar: f64,
}

pub fn rmse(predicted: &[Trajectory], truth: &[Trajectory], components: &Components) -> Result<Rmse> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::GridMismatch(format!(
            "{} predicted against {} true trajectories",
            predicted.len(),
            truth.len()
        )));
    }
    let steps = truth[0].len();
    let dim = truth[0].dim();
    let idx = components.indices(dim);
    if idx.is_empty() || idx.iter().any(|&i| i >= dim) {
        return Err(Error::InvalidArgument(format!(
            "component selection {idx:?} for dimension {dim}"
        )));
    }
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != steps || t.len() != steps {
            return Err(Error::GridMismatch(format!(
                "trajectories of {} and {} samples, expected {steps}",
                p.len(),
                t.len()
            )));
        }
        for (a, b) in p.times.iter().zip(&t.times) {
            if (a - b).abs() > 1e-9 * b.abs().max(1.0) {
                return Err(Error::GridMismatch(format!("time {a} against {b}")));
            }
        }
    }
    let per_count = (predicted.len() * idx.len()) as f64;
    let mut per_step = Vec::with_capacity(steps);
    let mut total = 0.0;
    for k in 0..steps {
        let mut s = 0.0;
        for (p, t) in predicted.iter().zip(truth) {
            for &i in &idx {
                s += (p.states[k][i] - t.states[k][i]).powi(2);
            }
        }
        total += s;
        per_step.push((s / per_count).sqrt());
    }
    Ok(Rmse {
        per_step,
        scalar: (total / (per_count * steps as f64)).sqrt(),
    })
}

/// Trailing mean over `n` samples; the first `n − 1` entries average what is
/// available.
pub fn sma(series: &MetricSeries, n: usize) -> Result<MetricSeries> {
    if n == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    let v = &series.values;
    let mut out = Vec::with_capacity(v.len());
    let mut sum = 0.0;
    for k in 0..v.len() {
        sum += v[k];
        if k >= n {
            sum -= v[k - n];
        }
        let count = (k + 1).min(n);
        out.push(if n == 1 { v[k] } else { sum / count as f64 });
    }
    MetricSeries::new(format!("{}_sma{n}", series.label), series.times.clone(), out)
}

/// Energy along a trajectory and its RMSE against the initial energy.
pub fn energy_series<F>(label: &str, trajectory: &Trajectory, energy: F) -> Result<(MetricSeries, f64)>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let values = trajectory
        .states
        .iter()
        .map(|s| energy(s))
        .collect::<Result<Vec<f64>>>()?;
    let e0 = values.first().copied().unwrap_or(0.0);
    let rmse = (values.iter().map(|e| (e - e0).powi(2)).sum::<f64>() / values.len().max(1) as f64).sqrt();
    Ok((MetricSeries::new(label, trajectory.times.clone(), values)?, rmse))
}

/// `(max − min) / |mean|` of the energy along a trajectory.
pub fn relative_energy_spread<F>(trajectory: &Trajectory, energy: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let (series, _) = energy_series("energy", trajectory, energy)?;
    let v = &series.values;
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Ok((hi - lo) / mean.abs())
}

/// Plot-ready CSV: `t` followed by one column per series.
pub fn series_to_csv(series: &[MetricSeries]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend(series.iter().map(|s| s.label.clone()));
    w.write_record(&header)?;
    if let Some(first) = series.first() {
        for s in series {
            if s.times.len() != first.times.len() {
                return Err(Error::GridMismatch(format!(
                    "series {} has {} samples, {} has {}",
                    s.label,
                    s.times.len(),
                    first.label,
                    first.times.len()
                )));
            }
        }
        for k in 0..first.times.len() {
            let mut rec = vec![first.times[k].to_string()];
            rec.extend(series.iter().map(|s| s.values[k].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    TrueInitial,
    PerturbedInitial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OpenLoop,
    Ukf,
}

impl Scenario {
    fn name(self) -> &'static str {
        match self {
            Scenario::TrueInitial => "true_initial",
            Scenario::PerturbedInitial => "perturbed_initial",
        }
    }
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::OpenLoop => "open_loop",
            Mode::Ukf => "ukf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub scenario: Scenario,
    pub mode: Mode,
    pub pos_rmse: f64,
    pub vel_rmse: f64,
    pub energy_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompareReport {
    pub rows: Vec<ReportRow>,
}

fn rank(model: &str) -> Option<u8> {
    if model.starts_with("AHNN") {
        Some(0)
    } else {
        match model {
            "HNN" => Some(1),
            "NODE" => Some(2),
            "MLP" => Some(3),
            _ => None,
        }
    }
}

impl CompareReport {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        CompareReport { rows }
    }

    /// Whether position RMSE follows AHNN ≤ HNN ≤ NODE ≤ MLP among the
    /// models present for this scenario and mode. `None` with fewer than two
    /// ranked models.
    pub fn ordering_held(&self, scenario: Scenario, mode: Mode) -> Option<bool> {
        let ranked: Vec<(u8, f64)> = self
            .rows
            .iter()
            .filter(|r| r.scenario == scenario && r.mode == mode)
            .filter_map(|r| rank(&r.model).map(|k| (k, r.pos_rmse)))
            .collect();
        if ranked.len() < 2 {
            return None;
        }
        Some(ranked.iter().all(|(ka, a)| {
            ranked.iter().all(|(kb, b)| !(ka < kb) || a <= b)
        }))
    }

    fn flag(&self, scenario: Scenario, mode: Mode) -> &'static str {
        match self.ordering_held(scenario, mode) {
            Some(true) => "yes",
            Some(false) => "no",
            None => "n/a",
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "model",
            "scenario",
            "mode",
            "pos_rmse",
            "vel_rmse",
            "energy_rmse",
            "ordering_held",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.scenario.name().into(),
                r.mode.name().into(),
                r.pos_rmse.to_string(),
                r.vel_rmse.to_string(),
                r.energy_rmse.map_or(String::new(), |e| e.to_string()),
                self.flag(r.scenario, r.mode).into(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:<18} {:<10} {:>13} {:>13} {:>13} {:>8}",
            "model", "scenario", "mode", "pos_rmse", "vel_rmse", "energy_rmse", "ordered"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:<18} {:<10} {:>13.4e} {:>13.4e} {:>13} {:>8}",
                r.model,
                r.scenario.name(),
                r.mode.name(),
                r.pos_rmse,
                r.vel_rmse,
                r.energy_rmse.map_or("-".to_string(), |e| format!("{e:.4e}")),
                self.flag(r.scenario, r.mode)
            );
        }
        s
    }
}
