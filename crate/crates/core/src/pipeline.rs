//! Config-driven commands: generate, train, predict, filter, evaluate.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/      train.csv val.csv test.csv manifest.toml
//! models/    <LABEL>.toml <LABEL>_history.csv
//! predict/   <LABEL>_true_initial.csv <LABEL>_perturbed_initial.csv
//! filter/    <LABEL>_<scenario>_traj<ID>.csv
//! report/    report.csv report.txt summary.toml energy_*.csv moving_rmse_*.csv
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, CompareReport, Components, MetricSeries, Mode, ReportRow, Scenario};
use crate::integrators::{StepperSpec, Trajectory};
use crate::io::write_atomic;
use crate::linalg::Matrix;
use crate::models::{rollout_batch, ModelKind, NeuralPredictor};
use crate::systems::{ObservationSpec, SystemSpec};
use crate::training::data::{trajectories_to_csv, Horizon, InitialSampler};
use crate::training::{self, read_dataset, write_dataset, DatasetSpec, History, TrainConfig, TrajectoryDataset};
use crate::ukf::{self, GaussianBelief, Measurement, UkfConfig, UtConfig};

/// Largest relative energy spread accepted in generated data.
pub const ENERGY_GATE: f64 = 1e-8;

const PERTURB_SALT: u64 = 0x5045_5254;
const MEASURE_SALT: u64 = 0x4d45_4153;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub system: SystemSpec,
    pub sampler: InitialSampler,
    pub stepper: StepperSpec,
    pub count: usize,
    pub dt: f64,
    pub horizon: Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub kind: ModelKind,
    #[serde(default = "one")]
    pub window: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "one")]
    pub substeps: usize,
}

impl ModelEntry {
    pub fn label(&self) -> String {
        self.kind.label(self.window)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observe {
    PositionOnly,
    FullState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    /// Test trajectories used by predict, filter and evaluate.
    #[serde(default = "d_trajectories")]
    pub trajectories: usize,
    /// Rollout length; defaults to the full test trajectory.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "d_update_every")]
    pub update_every: usize,
    #[serde(default = "d_observe")]
    pub observe: Observe,
    pub obs_sigma: f64,
    /// Diagonal of the additive process noise.
    pub process_noise: Vec<f64>,
    /// Diagonal of the initial covariance, also used to draw perturbations.
    pub p0: Vec<f64>,
    #[serde(default)]
    pub ut: UtConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default = "d_sma")]
    pub sma_window: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { sma_window: d_sma() }
    }
}

fn one() -> usize {
    1
}
fn d_trajectories() -> usize {
    10
}
fn d_update_every() -> usize {
    60
}
fn d_observe() -> Observe {
    Observe::PositionOnly
}
fn d_sma() -> usize {
    240
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub train: TrainConfig,
    pub filter: FilterSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    /// Reads a config file; a relative `out_dir` is taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.out_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.out_dir = parent.join(&cfg.out_dir);
            }
        }
        Ok(cfg)
    }

    pub fn with_overrides(mut self, seed: Option<u64>, out_dir: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out_dir {
            self.out_dir = o;
        }
        self
    }

    pub fn state_dim(&self) -> usize {
        2 * self.dataset.system.dof()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec {
            system: d.system,
            sampler: d.sampler.clone(),
            stepper: d.stepper.clone(),
            count: d.count,
            dt: d.dt,
            horizon: d.horizon,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn ukf_config(&self) -> UkfConfig {
        let f = &self.filter;
        let dof = self.dataset.system.dof();
        let obs = match f.observe {
            Observe::PositionOnly => ObservationSpec::position_only(dof, f.obs_sigma),
            Observe::FullState => ObservationSpec::full_state(2 * dof, f.obs_sigma),
        };
        UkfConfig {
            ut: f.ut,
            process_noise: Matrix::from_diag(&f.process_noise),
            obs,
            update_every: f.update_every,
        }
    }

    pub fn p0(&self) -> Matrix {
        Matrix::from_diag(&self.filter.p0)
    }

    /// Checks every field; touches nothing on disk except to confirm that
    /// `out_dir` is not an existing file.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::ConfigInvalid(format!("{name}: {e}"));
        self.dataset_spec().validate().map_err(|e| field("dataset", e))?;
        let d = self.state_dim();
        if self.models.is_empty() {
            return Err(Error::ConfigInvalid("models: at least one model is required".into()));
        }
        let mut labels = BTreeSet::new();
        for (i, m) in self.models.iter().enumerate() {
            let name = format!("models[{i}]");
            if m.window == 0 || (m.kind != ModelKind::Ahnn && m.window != 1) {
                return Err(Error::ConfigInvalid(format!(
                    "{name}.window: {} is invalid for {:?}",
                    m.window, m.kind
                )));
            }
            if m.hidden.is_empty() || m.hidden.contains(&0) {
                return Err(Error::ConfigInvalid(format!(
                    "{name}.hidden: needs at least one layer of positive width"
                )));
            }
            if m.substeps == 0 {
                return Err(Error::ConfigInvalid(format!("{name}.substeps: must be at least 1")));
            }
            if !labels.insert(m.label()) {
                return Err(Error::ConfigInvalid(format!("{name}: duplicate label {}", m.label())));
            }
        }
        if self.train.epochs == 0 {
            return Err(Error::ConfigInvalid("train.epochs must be at least 1".into()));
        }
        self.train_config().validate().map_err(|e| field("train", e))?;
        let f = &self.filter;
        if f.trajectories == 0 {
            return Err(Error::ConfigInvalid("filter.trajectories: must be at least 1".into()));
        }
        if f.steps == Some(0) {
            return Err(Error::ConfigInvalid("filter.steps: must be at least 1".into()));
        }
        if let Some(s) = f.steps {
            let available = self.dataset_spec().horizon_steps()?;
            if s > available {
                return Err(Error::ConfigInvalid(format!(
                    "filter.steps: {s} exceeds the {available}-step dataset horizon"
                )));
            }
        }
        if !(f.obs_sigma.is_finite() && f.obs_sigma > 0.0) {
            return Err(Error::ConfigInvalid("filter.obs_sigma: must be positive".into()));
        }
        if f.process_noise.len() != d || f.process_noise.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::ConfigInvalid(format!(
                "filter.process_noise: needs {d} non-negative entries"
            )));
        }
        if f.p0.len() != d || f.p0.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::ConfigInvalid(format!("filter.p0: needs {d} positive entries")));
        }
        self.ukf_config().validate(d).map_err(|e| field("filter", e))?;
        if self.evaluate.sma_window == 0 {
            return Err(Error::ConfigInvalid("evaluate.sma_window: must be at least 1".into()));
        }
        if self.out_dir.is_file() {
            return Err(Error::ConfigInvalid(format!(
                "out_dir: {} is a file",
                self.out_dir.display()
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.out_dir.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn model_path(&self, label: &str) -> PathBuf {
        self.root.join("models").join(format!("{label}.toml"))
    }
    pub fn history_path(&self, label: &str) -> PathBuf {
        self.root.join("models").join(format!("{label}_history.csv"))
    }
    pub fn predict_path(&self, label: &str, scenario: Scenario) -> PathBuf {
        self.root.join("predict").join(format!("{label}_{}.csv", scenario_name(scenario)))
    }
    pub fn filter_path(&self, label: &str, scenario: Scenario, id: usize) -> PathBuf {
        self.root
            .join("filter")
            .join(format!("{label}_{}_traj{id}.csv", scenario_name(scenario)))
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn scenario_name(s: Scenario) -> &'static str {
    match s {
        Scenario::TrueInitial => "true_initial",
        Scenario::PerturbedInitial => "perturbed_initial",
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::OpenLoop => "open_loop",
        Mode::Ukf => "ukf",
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::from)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    write_atomic(path, bytes)
}

/// Fails when any trajectory's true energy spread exceeds `tol`.
pub fn check_energy_gate(system: &SystemSpec, trajectories: &[Trajectory], tol: f64) -> Result<()> {
    for (i, t) in trajectories.iter().enumerate() {
        let spread = eval::relative_energy_spread(t, |x| system.hamiltonian(x))?;
        if !(spread <= tol) {
            return Err(Error::InvalidArgument(format!(
                "trajectory {i} has relative energy spread {spread:e} above {tol:e}"
            )));
        }
    }
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let spec = cfg.dataset_spec();
    info!("generating {} trajectories with seed {}", spec.count, spec.seed);
    let data = TrajectoryDataset::generate(&spec)?;
    let dir = cfg.layout().data_dir();
    ensure_dir(&dir)?;
    write_dataset(&dir, &spec, &data)?;
    info!("dataset written to {}", dir.display());
    Ok(data)
}

fn load_data(cfg: &RunConfig) -> Result<TrajectoryDataset> {
    let dir = cfg.layout().data_dir();
    if !dir.join("manifest.toml").is_file() {
        return Err(Error::MissingArtifact(format!(
            "{}: run `generate` first",
            dir.join("manifest.toml").display()
        )));
    }
    let (_, data) = read_dataset(&dir)?;
    Ok(data)
}

/// Builds an untrained model for `entry` on the dataset's normalization.
pub fn build_model(entry: &ModelEntry, data: &TrajectoryDataset, seed: u64) -> Result<NeuralPredictor> {
    let mut m = NeuralPredictor::new(entry.kind, entry.window, &entry.hidden, data.norm.clone(), data.dt, seed)?;
    m.substeps = entry.substeps;
    m.system = Some(data.system);
    m.validate()?;
    Ok(m)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<(String, History)>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let train_set = data.train();
    check_energy_gate(&data.system, &train_set, ENERGY_GATE)?;
    let val_set = data.val();
    let tc = cfg.train_config();
    let layout = cfg.layout();
    let mut out = Vec::new();
    for entry in &cfg.models {
        let label = entry.label();
        info!("training {label}");
        let model = build_model(entry, &data, cfg.seed)?;
        let (best, history) = training::train(model, &train_set, &val_set, &tc)?;
        let path = layout.model_path(&label);
        write_file(&path, best.to_toml()?.as_bytes())?;
        write_file(&layout.history_path(&label), &history.to_csv()?)?;
        info!("{label}: best epoch {:?}, checkpoint {}", history.best_epoch, path.display());
        out.push((label, history));
    }
    Ok(out)
}

fn load_model(cfg: &RunConfig, entry: &ModelEntry) -> Result<NeuralPredictor> {
    let path = cfg.layout().model_path(&entry.label());
    if !path.is_file() {
        return Err(Error::MissingArtifact(format!(
            "{}: run `train` first",
            path.display()
        )));
    }
    NeuralPredictor::load_checkpoint(&path)
}

/// Ground truth, perturbed initial states and simulated measurements shared
/// by every model in an evaluation.
#[derive(Debug, Clone)]
pub struct EvalSetup {
    pub ids: Vec<usize>,
    pub truth: Vec<Trajectory>,
    pub perturbed: Vec<Vec<f64>>,
    pub measurements: Vec<Vec<Measurement>>,
    pub ukf: UkfConfig,
    pub p0: Matrix,
}

impl EvalSetup {
    /// Perturbation of trajectory `i` is drawn from N(0, P₀) on its own
    /// seeded stream; so are its measurements.
    pub fn new(
        ids: Vec<usize>,
        truth: Vec<Trajectory>,
        steps: usize,
        ukf: UkfConfig,
        p0: Matrix,
        seed: u64,
    ) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::InvalidArgument("no evaluation trajectories".into()));
        }
        let truth: Vec<Trajectory> = truth
            .into_iter()
            .map(|t| {
                if t.len() <= steps {
                    return Err(Error::InvalidArgument(format!(
                        "trajectory of {} samples is shorter than {steps} steps",
                        t.len()
                    )));
                }
                Ok(Trajectory {
                    times: t.times[..=steps].to_vec(),
                    states: t.states[..=steps].to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        let chol = crate::linalg::cholesky_lower(&p0)?;
        let mut perturbed = Vec::with_capacity(truth.len());
        let mut measurements = Vec::with_capacity(truth.len());
        for (i, t) in truth.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PERTURB_SALT);
            rng.set_stream(i as u64);
            let e: Vec<f64> = (0..p0.rows()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let de = crate::linalg::mat_vec(&chol, &e)?;
            perturbed.push(t.states[0].iter().zip(&de).map(|(x, d)| x + d).collect());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MEASURE_SALT);
            rng.set_stream(i as u64);
            measurements.push(ukf::simulate_measurements(&t.states, &ukf.obs, ukf.update_every, &mut rng)?);
        }
        Ok(EvalSetup {
            ids,
            truth,
            perturbed,
            measurements,
            ukf,
            p0,
        })
    }

    pub fn from_config(cfg: &RunConfig, data: &TrajectoryDataset) -> Result<Self> {
        let ids: Vec<usize> = data.split.test.iter().copied().take(cfg.filter.trajectories).collect();
        if ids.is_empty() {
            return Err(Error::InvalidArgument("the test split is empty".into()));
        }
        let truth = data.subset(&ids);
        let steps = cfg.filter.steps.unwrap_or(truth[0].len() - 1);
        Self::new(ids, truth, steps, cfg.ukf_config(), cfg.p0(), cfg.seed)
    }

    pub fn steps(&self) -> usize {
        self.truth[0].len() - 1
    }

    pub fn initial_states(&self, scenario: Scenario) -> Vec<Vec<f64>> {
        match scenario {
            Scenario::TrueInitial => self.truth.iter().map(|t| t.states[0].clone()).collect(),
            Scenario::PerturbedInitial => self.perturbed.clone(),
        }
    }

    pub fn open_loop(&self, model: &NeuralPredictor, scenario: Scenario) -> Result<Vec<Trajectory>> {
        rollout_batch(model, &self.initial_states(scenario), self.steps())
    }

    pub fn filter_runs(&self, model: &NeuralPredictor, scenario: Scenario) -> Result<Vec<ukf::FilterRun>> {
        let x0s = self.initial_states(scenario);
        x0s.par_iter()
            .zip(self.measurements.par_iter())
            .map(|(x0, meas)| {
                let b0 = GaussianBelief::new(x0.clone(), self.p0.clone())?;
                ukf::run_filter(model, &self.ukf, &b0, meas, self.steps())
            })
            .collect()
    }

    pub fn filtered(&self, model: &NeuralPredictor, scenario: Scenario) -> Result<Vec<Trajectory>> {
        Ok(self
            .filter_runs(model, scenario)?
            .into_iter()
            .zip(&self.truth)
            .map(|(run, t)| Trajectory {
                times: t.times.clone(),
                states: run.means(),
            })
            .collect())
    }
}

/// Metrics of one model in one scenario and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioMetrics {
    pub row: ReportRow,
    /// Per-step position RMSE across trajectories.
    pub pos_per_step: Vec<f64>,
    /// True energy along the first trajectory.
    pub energy: MetricSeries,
}

/// Position and velocity RMSE plus the RMS over trajectories of the energy
/// RMSE against each trajectory's initial energy.
pub fn score(
    label: &str,
    system: &SystemSpec,
    predicted: &[Trajectory],
    truth: &[Trajectory],
    scenario: Scenario,
    mode: Mode,
) -> Result<ScenarioMetrics> {
    let pos = eval::rmse(predicted, truth, &Components::Positions)?;
    let mom = eval::rmse(predicted, truth, &Components::Momenta)?;
    let mut e2 = 0.0;
    let mut first = None;
    for p in predicted {
        let (series, r) = eval::energy_series(label, p, |x| system.hamiltonian(x))?;
        e2 += r * r;
        first.get_or_insert(series);
    }
    Ok(ScenarioMetrics {
        row: ReportRow {
            model: label.to_string(),
            scenario,
            mode,
            pos_rmse: pos.scalar,
            vel_rmse: mom.scalar / system.mass(),
            energy_rmse: Some((e2 / predicted.len() as f64).sqrt()),
        },
        pos_per_step: pos.per_step,
        energy: first.expect("at least one trajectory"),
    })
}

pub const SCENARIOS: [Scenario; 2] = [Scenario::TrueInitial, Scenario::PerturbedInitial];
pub const MODES: [Mode; 2] = [Mode::OpenLoop, Mode::Ukf];

pub fn evaluate_model(
    label: &str,
    model: &NeuralPredictor,
    system: &SystemSpec,
    setup: &EvalSetup,
) -> Result<Vec<ScenarioMetrics>> {
    let mut out = Vec::new();
    for scenario in SCENARIOS {
        for mode in MODES {
            let predicted = match mode {
                Mode::OpenLoop => setup.open_loop(model, scenario)?,
                Mode::Ukf => setup.filtered(model, scenario)?,
            };
            out.push(score(label, system, &predicted, &setup.truth, scenario, mode)?);
        }
    }
    Ok(out)
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let models = cfg.models.iter().map(|m| load_model(cfg, m)).collect::<Result<Vec<_>>>()?;
    let setup = EvalSetup::from_config(cfg, &data)?;
    let layout = cfg.layout();
    let mut written = Vec::new();
    for (entry, model) in cfg.models.iter().zip(&models) {
        for scenario in SCENARIOS {
            let trajs = setup.open_loop(model, scenario)?;
            let path = layout.predict_path(&entry.label(), scenario);
            write_file(&path, &trajectories_to_csv(&setup.ids, &trajs)?)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn cmd_filter(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let models = cfg.models.iter().map(|m| load_model(cfg, m)).collect::<Result<Vec<_>>>()?;
    let setup = EvalSetup::from_config(cfg, &data)?;
    let layout = cfg.layout();
    let mut written = Vec::new();
    for (entry, model) in cfg.models.iter().zip(&models) {
        for scenario in SCENARIOS {
            let runs = setup.filter_runs(model, scenario)?;
            for ((id, run), t) in setup.ids.iter().zip(&runs).zip(&setup.truth) {
                let path = layout.filter_path(&entry.label(), scenario, *id);
                write_file(&path, &ukf::beliefs_to_csv(&t.times, run)?)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
struct Summary {
    seed: u64,
    system: String,
    trajectories: usize,
    steps: usize,
    sma_window: usize,
    models: Vec<String>,
    ordering: Vec<OrderingEntry>,
}

#[derive(Debug, Serialize)]
struct OrderingEntry {
    scenario: String,
    mode: String,
    held: Option<bool>,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<CompareReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let models = cfg.models.iter().map(|m| load_model(cfg, m)).collect::<Result<Vec<_>>>()?;
    let setup = EvalSetup::from_config(cfg, &data)?;
    let mut metrics = Vec::new();
    for (entry, model) in cfg.models.iter().zip(&models) {
        info!("evaluating {}", entry.label());
        metrics.push(evaluate_model(&entry.label(), model, &data.system, &setup)?);
    }
    let report = CompareReport::new(metrics.iter().flatten().map(|m| m.row.clone()).collect());
    let dir = cfg.layout().report_dir();
    write_file(&dir.join("report.csv"), &report.to_csv()?)?;
    write_file(&dir.join("report.txt"), report.to_text().as_bytes())?;

    let times = setup.truth[0].times.clone();
    let n = cfg.evaluate.sma_window;
    for (si, scenario) in SCENARIOS.iter().enumerate() {
        let (truth_energy, _) = eval::energy_series("truth", &setup.truth[0], |x| data.system.hamiltonian(x))?;
        let mut energy = vec![truth_energy];
        for m in &metrics {
            energy.push(m[2 * si].energy.clone());
        }
        write_file(
            &dir.join(format!("energy_{}.csv", scenario_name(*scenario))),
            &eval::series_to_csv(&energy)?,
        )?;
        for (mi, mode) in MODES.iter().enumerate() {
            let series = metrics
                .iter()
                .map(|m| {
                    let s = &m[2 * si + mi];
                    let raw = MetricSeries::new(s.row.model.clone(), times.clone(), s.pos_per_step.clone())?;
                    let mut smoothed = eval::sma(&raw, n)?;
                    smoothed.label = s.row.model.clone();
                    Ok(smoothed)
                })
                .collect::<Result<Vec<_>>>()?;
            write_file(
                &dir.join(format!("moving_rmse_{}_{}.csv", scenario_name(*scenario), mode_name(*mode))),
                &eval::series_to_csv(&series)?,
            )?;
        }
    }

    let summary = Summary {
        seed: cfg.seed,
        system: data.system.label().into(),
        trajectories: setup.truth.len(),
        steps: setup.steps(),
        sma_window: n,
        models: cfg.models.iter().map(|m| m.label()).collect(),
        ordering: SCENARIOS
            .iter()
            .flat_map(|s| {
                let report = &report;
                MODES.iter().map(move |m| OrderingEntry {
                    scenario: scenario_name(*s).into(),
                    mode: mode_name(*m).into(),
                    held: report.ordering_held(*s, *m),
                })
            })
            .collect(),
    };
    let text = toml::to_string(&summary).map_err(|e| Error::Io(e.to_string()))?;
    write_file(&dir.join("summary.toml"), text.as_bytes())?;
    Ok(report)
}
