//! Trajectory datasets: generation, splits, windows and files.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{propagate, StepperSpec, Trajectory};
use crate::models::NormalizationStats;
use crate::systems::{OrbitalElements, SystemSpec, R_EQ_EARTH};

const MAX_RETRIES: usize = 10;

/// Initial-condition distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSampler {
    /// Independent uniform draws per state component.
    UniformBox { low: Vec<f64>, high: Vec<f64> },
    /// Orbits from uniform periapsis altitude (km), eccentricity and
    /// inclination (degrees). RAAN, argument of periapsis and true anomaly
    /// are uniform in [0, 2π).
    Orbit {
        altitude_km: [f64; 2],
        eccentricity: [f64; 2],
        inclination_deg: [f64; 2],
    },
}

impl InitialSampler {
    pub fn mass_spring_default() -> Self {
        InitialSampler::UniformBox {
            low: vec![-1.0, -1.0],
            high: vec![1.0, 1.0],
        }
    }

    pub fn orbit_default() -> Self {
        InitialSampler::Orbit {
            altitude_km: [540.0, 560.0],
            eccentricity: [0.7, 0.8],
            inclination_deg: [60.0, 66.0],
        }
    }

    pub fn validate(&self, system: &SystemSpec) -> Result<()> {
        let ordered = |r: [f64; 2], what: &str| {
            if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::ConfigInvalid(format!("{what} range {r:?} is not ordered")))
            }
        };
        match self {
            InitialSampler::UniformBox { low, high } => {
                if low.len() != 2 * system.dof() || high.len() != low.len() {
                    return Err(Error::ConfigInvalid(format!(
                        "sampler box of dimension {} for a {}-dimensional state",
                        low.len(),
                        2 * system.dof()
                    )));
                }
                for (l, h) in low.iter().zip(high) {
                    ordered([*l, *h], "sampler box")?;
                }
                Ok(())
            }
            InitialSampler::Orbit {
                altitude_km,
                eccentricity,
                inclination_deg,
            } => {
                if !matches!(system, SystemSpec::TwoBodyJ2 { .. }) {
                    return Err(Error::ConfigInvalid(
                        "the orbit sampler needs a two-body system".into(),
                    ));
                }
                ordered(*altitude_km, "altitude")?;
                ordered(*eccentricity, "eccentricity")?;
                ordered(*inclination_deg, "inclination")?;
                if eccentricity[0] < 0.0 || eccentricity[1] >= 1.0 {
                    return Err(Error::ConfigInvalid(
                        "eccentricity must lie in [0, 1)".into(),
                    ));
                }
                if altitude_km[0] <= -R_EQ_EARTH {
                    return Err(Error::ConfigInvalid("periapsis below the center".into()));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, system: &SystemSpec, rng: &mut R) -> Vec<f64> {
        let mut uniform = |r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..r[1])
            }
        };
        match self {
            InitialSampler::UniformBox { low, high } => low
                .iter()
                .zip(high)
                .map(|(l, h)| uniform([*l, *h]))
                .collect(),
            InitialSampler::Orbit {
                altitude_km,
                eccentricity,
                inclination_deg,
            } => {
                let alt = uniform(*altitude_km);
                let e = uniform(*eccentricity);
                let inc = uniform(*inclination_deg).to_radians();
                let raan = uniform([0.0, 2.0 * PI]);
                let argp = uniform([0.0, 2.0 * PI]);
                let nu = uniform([0.0, 2.0 * PI]);
                let el = OrbitalElements::from_periapsis_altitude(alt, e, inc, raan, argp, nu);
                let mut x = el.to_state(orbit_mu(system));
                let m = system.mass();
                for v in &mut x[3..] {
                    *v *= m;
                }
                x
            }
        }
    }

    /// Longest orbital period the sampler can produce.
    pub fn max_period(&self, system: &SystemSpec) -> Option<f64> {
        match self {
            InitialSampler::Orbit {
                altitude_km,
                eccentricity,
                ..
            } => {
                let el = OrbitalElements::from_periapsis_altitude(
                    altitude_km[1],
                    eccentricity[1],
                    0.0,
                    0.0,
                    0.0,
                    0.0,
                );
                Some(el.period(orbit_mu(system)))
            }
            InitialSampler::UniformBox { .. } => None,
        }
    }
}

fn orbit_mu(system: &SystemSpec) -> f64 {
    match system {
        SystemSpec::TwoBodyJ2 { mu, .. } => *mu,
        _ => unreachable!("orbit sampler on a non-orbital system"),
    }
}

/// Trajectory length, either in samples or in multiples of the longest
/// period the sampler can produce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Steps(usize),
    Periods(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub system: SystemSpec,
    pub sampler: InitialSampler,
    pub stepper: StepperSpec,
    pub count: usize,
    pub dt: f64,
    pub horizon: Horizon,
    pub seed: u64,
}

impl DatasetSpec {
    /// Mass-spring: 2500 trajectories on [0, 10] s sampled every 0.01 s.
    pub fn mass_spring(count: usize, seed: u64) -> Self {
        DatasetSpec {
            system: SystemSpec::mass_spring(),
            sampler: InitialSampler::mass_spring_default(),
            stepper: StepperSpec::gl4(),
            count,
            dt: 0.01,
            horizon: Horizon::Steps(1000),
            seed,
        }
    }

    /// Two-body J2: two periods sampled every 60 s, 6 internal 10 s steps.
    pub fn orbit(count: usize, seed: u64) -> Self {
        DatasetSpec {
            system: SystemSpec::earth_j2(),
            sampler: InitialSampler::orbit_default(),
            stepper: StepperSpec::composition(crate::integrators::CompositionTable::KahanLi8)
                .with_substeps(6),
            count,
            dt: 60.0,
            horizon: Horizon::Periods(2.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.sampler.validate(&self.system)?;
        self.stepper.validate()?;
        if self.count == 0 {
            return Err(Error::ConfigInvalid("count must be at least 1".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::ConfigInvalid(format!("dt {} must be positive", self.dt)));
        }
        self.horizon_steps()?;
        Ok(())
    }

    pub fn horizon_steps(&self) -> Result<usize> {
        let steps = match self.horizon {
            Horizon::Steps(n) => n,
            Horizon::Periods(k) => {
                let period = self.sampler.max_period(&self.system).ok_or_else(|| {
                    Error::ConfigInvalid("a horizon in periods needs the orbit sampler".into())
                })?;
                if !(k.is_finite() && k > 0.0) {
                    return Err(Error::ConfigInvalid(format!("invalid period count {k}")));
                }
                (k * period / self.dt).ceil() as usize
            }
        };
        if steps == 0 {
            return Err(Error::ConfigInvalid("horizon must be at least one step".into()));
        }
        Ok(steps)
    }
}

/// Generates `spec.count` trajectories. Trajectory `i` draws from its own
/// ChaCha stream, so the result does not depend on thread count. A failed
/// propagation is logged and redrawn, up to ten times.
pub fn generate_trajectories(spec: &DatasetSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let n_steps = spec.horizon_steps()?;
    (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let mut last = None;
            for attempt in 0..=MAX_RETRIES {
                let x0 = spec.sampler.sample(&spec.system, &mut rng);
                match propagate(&spec.stepper, &spec.system, &x0, spec.dt, n_steps) {
                    Ok(t) => return Ok(t),
                    Err(e) => {
                        log::warn!("trajectory {i} attempt {attempt} failed: {e}");
                        last = Some(e);
                    }
                }
            }
            Err(last.unwrap())
        })
        .collect()
}

/// Index sets of a trajectory-level split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Contiguous 80/15/5 split. With at least three trajectories every part
    /// is non-empty.
    pub fn fractions(count: usize) -> Self {
        let mut n_val = (0.15 * count as f64).round() as usize;
        let mut n_test = (0.05 * count as f64).round() as usize;
        if count >= 3 {
            n_val = n_val.max(1);
            n_test = n_test.max(1);
        }
        let n_train = count.saturating_sub(n_val + n_test);
        Split {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..count).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub system: SystemSpec,
    pub dt: f64,
    pub trajectories: Vec<Trajectory>,
    pub split: Split,
    /// Fitted on the training split only.
    pub norm: NormalizationStats,
}

impl TrajectoryDataset {
    pub fn from_trajectories(
        system: SystemSpec,
        dt: f64,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        let split = Split::fractions(trajectories.len());
        Self::with_split(system, dt, trajectories, split)
    }

    pub fn with_split(
        system: SystemSpec,
        dt: f64,
        trajectories: Vec<Trajectory>,
        split: Split,
    ) -> Result<Self> {
        let n = trajectories.len();
        let mut seen = vec![false; n];
        for &i in split.train.iter().chain(&split.val).chain(&split.test) {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "split index {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if split.train.is_empty() {
            return Err(Error::InvalidArgument("empty training split".into()));
        }
        let train: Vec<Trajectory> = split.train.iter().map(|&i| trajectories[i].clone()).collect();
        let norm = NormalizationStats::fit(&train, dt)?;
        Ok(TrajectoryDataset {
            system,
            dt,
            trajectories,
            split,
            norm,
        })
    }

    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let trajs = generate_trajectories(spec)?;
        Self::from_trajectories(spec.system, spec.dt, trajs)
    }

    pub fn subset(&self, ids: &[usize]) -> Vec<Trajectory> {
        ids.iter().map(|&i| self.trajectories[i].clone()).collect()
    }

    pub fn train(&self) -> Vec<Trajectory> {
        self.subset(&self.split.train)
    }

    pub fn val(&self) -> Vec<Trajectory> {
        self.subset(&self.split.val)
    }

    pub fn test(&self) -> Vec<Trajectory> {
        self.subset(&self.split.test)
    }
}

/// Normalized trajectories with every length-`W` window at stride 1.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub window: usize,
    states: Vec<Vec<Vec<f64>>>,
    index: Vec<(usize, usize)>,
}

impl WindowSet {
    pub fn new(trajectories: &[Trajectory], norm: &NormalizationStats, window: usize) -> Self {
        assert!(window >= 1);
        let states: Vec<Vec<Vec<f64>>> = trajectories
            .iter()
            .map(|t| t.states.iter().map(|s| norm.normalize(s)).collect())
            .collect();
        let mut index = Vec::new();
        for (t, s) in states.iter().enumerate() {
            for k in 0..s.len().saturating_sub(window) {
                index.push((t, k));
            }
        }
        WindowSet {
            window,
            states,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// `(trajectory, start)` of window `w`.
    pub fn position(&self, w: usize) -> (usize, usize) {
        self.index[w]
    }

    /// Normalized state `i` of window `w` (0 is the start).
    pub fn state(&self, w: usize, i: usize) -> &[f64] {
        let (t, k) = self.index[w];
        &self.states[t][k + i]
    }
}

fn state_header(dof: usize) -> Vec<String> {
    let mut h = vec!["traj_id".to_string(), "step".into(), "t".into()];
    h.extend((1..=dof).map(|i| format!("q{i}")));
    h.extend((1..=dof).map(|i| format!("p{i}")));
    h
}

/// CSV with header `traj_id, step, t, q1..qn, p1..pn`.
pub fn trajectories_to_csv(ids: &[usize], trajectories: &[Trajectory]) -> Result<Vec<u8>> {
    let dof = trajectories.first().map_or(0, |t| t.dim() / 2);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(state_header(dof))?;
    for (&id, t) in ids.iter().zip(trajectories) {
        for (k, (time, s)) in t.times.iter().zip(&t.states).enumerate() {
            let mut rec = vec![id.to_string(), k.to_string(), time.to_string()];
            rec.extend(s.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

pub fn trajectories_from_csv(bytes: &[u8]) -> Result<Vec<(usize, Trajectory)>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    if header.len() < 5 || (header.len() - 3) % 2 != 0 || &header[0] != "traj_id" {
        return Err(Error::Io(format!("unexpected trajectory header {header:?}")));
    }
    let mut out: BTreeMap<usize, Trajectory> = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::Io(format!("row {}: column {i}: {e}", line + 1)))
        };
        let id: usize = rec[0]
            .parse()
            .map_err(|e| Error::Io(format!("row {}: traj_id: {e}", line + 1)))?;
        let t = out.entry(id).or_insert_with(|| Trajectory {
            times: Vec::new(),
            states: Vec::new(),
        });
        t.times.push(parse(2)?);
        t.states.push((3..rec.len()).map(parse).collect::<Result<_>>()?);
    }
    Ok(out.into_iter().collect())
}

/// Dataset manifest written next to the split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub dt: f64,
    pub count: usize,
    pub horizon_steps: usize,
    pub system: SystemSpec,
    pub sampler: InitialSampler,
    pub stepper: StepperSpec,
    pub split: Split,
    pub norm: NormalizationStats,
}

/// Writes `train.csv`, `val.csv`, `test.csv` and `manifest.toml` into `dir`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, data: &TrajectoryDataset) -> Result<()> {
    for (name, ids) in [
        ("train.csv", &data.split.train),
        ("val.csv", &data.split.val),
        ("test.csv", &data.split.test),
    ] {
        let bytes = trajectories_to_csv(ids, &data.subset(ids))?;
        crate::io::write_atomic(&dir.join(name), &bytes)?;
    }
    let manifest = Manifest {
        format_version: 1,
        seed: spec.seed,
        dt: spec.dt,
        count: data.trajectories.len(),
        horizon_steps: spec.horizon_steps()?,
        system: spec.system,
        sampler: spec.sampler.clone(),
        stepper: spec.stepper.clone(),
        split: data.split.clone(),
        norm: data.norm.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    crate::io::write_atomic(&dir.join("manifest.toml"), text.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, TrajectoryDataset)> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::MissingArtifact(format!("{}: {e}", p.display())))
    };
    let manifest: Manifest = toml::from_str(
        std::str::from_utf8(&read("manifest.toml")?).map_err(|e| Error::Io(e.to_string()))?,
    )
    .map_err(|e| Error::Io(format!("manifest.toml: {e}")))?;
    let mut trajectories: Vec<Option<Trajectory>> = vec![None; manifest.count];
    for name in ["train.csv", "val.csv", "test.csv"] {
        for (id, t) in trajectories_from_csv(&read(name)?)? {
            let slot = trajectories
                .get_mut(id)
                .ok_or_else(|| Error::Io(format!("{name}: traj_id {id} out of range")))?;
            *slot = Some(t);
        }
    }
    let trajectories = trajectories
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::Io(format!("trajectory {i} missing"))))
        .collect::<Result<Vec<_>>>()?;
    let data = TrajectoryDataset::with_split(
        manifest.system,
        manifest.dt,
        trajectories,
        manifest.split.clone(),
    )?;
    if data.norm != manifest.norm {
        return Err(Error::Io("manifest normalization does not match the data".into()));
    }
    Ok((manifest, data))
}
