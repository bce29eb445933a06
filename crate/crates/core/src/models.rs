//! Learnable one-step maps: HNN (and its autoregressively trained AHNN
//! variant), a direct MLP map and a neural ODE.
//!
//! All three run in normalized coordinates. The HNN field is `J ∇H_θ(z)`,
//! the NODE field is an unconstrained `f_θ(z)`, and both are advanced with a
//! single RK4 step of size `dt / time_scale` per sample (times `substeps`).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tape, Var};
use crate::error::{Error, Result};
use crate::integrators::Trajectory;
use crate::linalg::Matrix;
use crate::systems::SystemSpec;

/// Dense tanh network. `weights[l]` is stored out x in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| Matrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut p.weights {
            let limit = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(p)
    }

    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight matrices and {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut sizes = vec![weights[0].cols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != *sizes.last().unwrap() || b.len() != w.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: weight {}x{}, bias {}, input {}",
                    w.rows(),
                    w.cols(),
                    b.len(),
                    sizes.last().unwrap()
                )));
            }
            sizes.push(w.rows());
        }
        check_sizes(&sizes)?;
        let p = MlpParams {
            layer_sizes: sizes,
            weights,
            biases,
        };
        if !p.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("in network parameters"));
        }
        Ok(p)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    /// Per layer: weights row-major, then the bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                theta.len()
            )));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let nw = w.data().len();
            w.data_mut().copy_from_slice(&theta[at..at + nw]);
            at += nw;
            let nb = b.len();
            b.copy_from_slice(&theta[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "network input {} for a network with input {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.weights.len() - 1;
        let mut h = x.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut a = crate::linalg::mat_vec(w, &h)?;
            for (ai, bi) in a.iter_mut().zip(b) {
                *ai += bi;
                if l < last {
                    *ai = ai.tanh();
                }
            }
            h = a;
        }
        Ok(h)
    }

    /// Tape version of [`forward`](Self::forward).
    pub fn forward_var<'t>(&self, tape: &'t Tape, x: &[Var<'t>]) -> Vec<Var<'t>> {
        let last = self.weights.len() - 1;
        let mut h = x.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let next = (0..w.rows())
                .map(|o| {
                    let mut a = tape.constant(b[o]);
                    for (i, hi) in h.iter().enumerate() {
                        a = a + *hi * w[(o, i)];
                    }
                    if l < last {
                        a.tanh()
                    } else {
                        a
                    }
                })
                .collect();
            h = next;
        }
        h
    }

    /// Inserts every parameter as a graph leaf.
    pub fn leaves(&self, g: &mut Graph) -> ParamIds {
        let weights = self.weights.iter().map(|w| g.leaf(w.clone())).collect();
        let biases = self
            .biases
            .iter()
            .map(|b| g.leaf(Matrix::from_vec(1, b.len(), b.clone()).unwrap()))
            .collect();
        ParamIds { weights, biases }
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::ShapeMismatch(format!(
            "invalid layer sizes {sizes:?}"
        )));
    }
    Ok(())
}

/// Graph leaves for an [`MlpParams`].
#[derive(Debug, Clone)]
pub struct ParamIds {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl ParamIds {
    /// Gradient in [`MlpParams::flatten`] order; unused leaves give zeros.
    pub fn flat_grad(&self, g: &Graph, grads: &crate::autodiff::Grads) -> Vec<f64> {
        let mut out = Vec::new();
        for (&w, &b) in self.weights.iter().zip(&self.biases) {
            for id in [w, b] {
                match grads.get(id) {
                    Some(m) => out.extend_from_slice(m.data()),
                    None => out.extend(std::iter::repeat_n(0.0, g.value(id).data().len())),
                }
            }
        }
        out
    }
}

/// `tanh` hidden layers and a linear head over a batch node.
pub fn mlp_graph(g: &mut Graph, p: &ParamIds, x: NodeId) -> NodeId {
    let last = p.weights.len() - 1;
    let mut h = x;
    for l in 0..=last {
        let a = g.matmul_t(h, p.weights[l]);
        let a = g.add_row(a, p.biases[l]);
        h = if l < last { g.tanh(a) } else { a };
    }
    h
}

/// `∇ₓ` of a scalar-output MLP, built from its forward activations.
pub fn mlp_input_grad_graph(g: &mut Graph, p: &ParamIds, x: NodeId) -> NodeId {
    let last = p.weights.len() - 1;
    let rows = g.value(x).rows();
    let mut hidden = Vec::with_capacity(last);
    let mut h = x;
    for l in 0..last {
        let a = g.matmul_t(h, p.weights[l]);
        let a = g.add_row(a, p.biases[l]);
        h = g.tanh(a);
        hidden.push(h);
    }
    let mut grad = g.broadcast_row(p.weights[last], rows);
    for l in (0..last).rev() {
        let d = g.one_minus_square(hidden[l]);
        let delta = g.mul(grad, d);
        grad = g.matmul(delta, p.weights[l]);
    }
    grad
}

/// Per-dimension midpoints of the training range, with one shared half-range
/// for all positions and one for all momenta.
///
/// Scaling every `(qᵢ, pᵢ)` pair by the same factors keeps Hamilton's
/// equations in canonical form up to a constant, which the time scale absorbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Characteristic time of the normalized motion. Models step by
    /// `dt / time_scale` in normalized time.
    pub time_scale: f64,
}

impl NormalizationStats {
    pub fn new(min: Vec<f64>, max: Vec<f64>, time_scale: f64) -> Result<Self> {
        let s = NormalizationStats {
            min,
            max,
            time_scale,
        };
        s.validate()?;
        Ok(s)
    }

    /// Fits the ranges and the time scale `dt·RMS(z)/RMS(Δz)` on training
    /// trajectories sampled every `dt`.
    pub fn fit(trajectories: &[Trajectory], dt: f64) -> Result<Self> {
        let d = trajectories
            .first()
            .map(|t| t.dim())
            .ok_or_else(|| Error::InvalidArgument("no trajectories to fit".into()))?;
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for s in trajectories.iter().flat_map(|t| &t.states) {
            if s.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "state of length {} in a dataset of dimension {d}",
                    s.len()
                )));
            }
            for i in 0..d {
                min[i] = min[i].min(s[i]);
                max[i] = max[i].max(s[i]);
            }
        }
        let mut stats = NormalizationStats {
            min,
            max,
            time_scale: 1.0,
        };
        stats.validate()?;
        let (mut zz, mut dz, mut nz, mut nd) = (0.0, 0.0, 0usize, 0usize);
        for t in trajectories {
            let zs: Vec<Vec<f64>> = t.states.iter().map(|s| stats.normalize(s)).collect();
            for z in &zs {
                zz += z.iter().map(|v| v * v).sum::<f64>();
                nz += d;
            }
            for w in zs.windows(2) {
                dz += w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).powi(2)).sum::<f64>();
                nd += d;
            }
        }
        if nd > 0 && dz > 0.0 && zz > 0.0 {
            let rms_z = (zz / nz as f64).sqrt();
            let rms_dz = (dz / nd as f64).sqrt();
            stats.time_scale = dt.abs() * rms_z / rms_dz;
        }
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.min.len();
        if d == 0 || !d.is_multiple_of(2) || self.max.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "normalization bounds of lengths {} and {}",
                d,
                self.max.len()
            )));
        }
        for i in 0..d {
            if !(self.min[i].is_finite() && self.max[i].is_finite()) {
                return Err(Error::non_finite(format!("in normalization bound {i}")));
            }
            if self.max[i] <= self.min[i] {
                return Err(Error::InvalidArgument(format!(
                    "dimension {i} is constant in the training data"
                )));
            }
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid time scale {}",
                self.time_scale
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.min[i] + self.max[i])
    }

    pub fn half_range(&self, i: usize) -> f64 {
        let n = self.dim() / 2;
        let block = if i < n { 0..n } else { n..2 * n };
        block
            .map(|j| 0.5 * (self.max[j] - self.min[j]))
            .fold(0.0, f64::max)
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| (x[i] - self.center(i)) / self.half_range(i))
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        (0..z.len())
            .map(|i| self.center(i) + self.half_range(i) * z[i])
            .collect()
    }

    pub fn normalize_rows(&self, x: &Matrix) -> Matrix {
        map_rows(x, |r| self.normalize(r))
    }

    pub fn denormalize_rows(&self, z: &Matrix) -> Matrix {
        map_rows(z, |r| self.denormalize(r))
    }
}

fn map_rows(x: &Matrix, f: impl Fn(&[f64]) -> Vec<f64>) -> Matrix {
    let mut out = Vec::with_capacity(x.data().len());
    for i in 0..x.rows() {
        out.extend(f(x.row(i)));
    }
    Matrix::from_vec(x.rows(), x.cols(), out).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Node,
    Hnn,
    Ahnn,
}

impl ModelKind {
    pub fn is_hamiltonian(self) -> bool {
        matches!(self, ModelKind::Hnn | ModelKind::Ahnn)
    }

    pub fn label(self, window: usize) -> String {
        match self {
            ModelKind::Mlp => "MLP".into(),
            ModelKind::Node => "NODE".into(),
            ModelKind::Hnn => "HNN".into(),
            ModelKind::Ahnn => format!("AHNN_{window}"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(ModelKind::Mlp),
            "node" => Ok(ModelKind::Node),
            "hnn" => Ok(ModelKind::Hnn),
            "ahnn" => Ok(ModelKind::Ahnn),
            other => Err(Error::InvalidArgument(format!("unknown model kind {other:?}"))),
        }
    }
}

/// A one-step map on physical states.
pub trait Predictor: Sync {
    fn state_dim(&self) -> usize;

    /// Sampling interval of the map.
    fn dt(&self) -> f64;

    /// Steps every row of `xs`.
    fn step_batch(&self, xs: &Matrix) -> Result<Matrix>;

    fn step(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.step_batch(&m)?.into_data())
    }
}

/// A trained or freshly initialized network model.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPredictor {
    pub kind: ModelKind,
    /// Autoregressive training window. The runtime map does not depend on it.
    pub window: usize,
    pub net: MlpParams,
    pub norm: NormalizationStats,
    pub dt: f64,
    pub substeps: usize,
    pub seed: u64,
    pub system: Option<SystemSpec>,
}

impl NeuralPredictor {
    /// Glorot-initialized model with the given hidden widths.
    pub fn new(
        kind: ModelKind,
        window: usize,
        hidden: &[usize],
        norm: NormalizationStats,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        let d = norm.dim();
        let mut sizes = vec![d];
        sizes.extend_from_slice(hidden);
        sizes.push(if kind.is_hamiltonian() { 1 } else { d });
        let p = NeuralPredictor {
            kind,
            window,
            net: MlpParams::glorot(&sizes, seed)?,
            norm,
            dt,
            substeps: 1,
            seed,
            system: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.norm.validate()?;
        let d = self.norm.dim();
        let out = if self.kind.is_hamiltonian() { 1 } else { d };
        if self.net.input_dim() != d || self.net.output_dim() != out {
            return Err(Error::ShapeMismatch(format!(
                "{:?} network {:?} for state dimension {d}",
                self.kind,
                self.net.layer_sizes()
            )));
        }
        if self.window == 0 || (self.kind != ModelKind::Ahnn && self.window != 1) {
            return Err(Error::InvalidArgument(format!(
                "window {} is not valid for {:?}",
                self.window, self.kind
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) || self.substeps == 0 {
            return Err(Error::InvalidArgument(format!(
                "dt {} and substeps {} must be positive",
                self.dt, self.substeps
            )));
        }
        if let Some(sys) = &self.system {
            if 2 * sys.dof() != d {
                return Err(Error::ShapeMismatch(format!(
                    "system with {} degrees of freedom for state dimension {d}",
                    sys.dof()
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.kind.label(self.window)
    }

    /// Step size in normalized time.
    pub fn normalized_step(&self) -> f64 {
        self.dt / self.norm.time_scale / self.substeps as f64
    }

    /// Continuous field in normalized coordinates on a batch node.
    pub fn field_graph(&self, g: &mut Graph, p: &ParamIds, z: NodeId) -> NodeId {
        match self.kind {
            ModelKind::Hnn | ModelKind::Ahnn => {
                let grad = mlp_input_grad_graph(g, p, z);
                g.symplectic(grad)
            }
            ModelKind::Node => mlp_graph(g, p, z),
            ModelKind::Mlp => panic!("the MLP baseline has no vector field"),
        }
    }

    /// One normalized sample step on a batch node.
    pub fn step_graph(&self, g: &mut Graph, p: &ParamIds, z: NodeId) -> NodeId {
        if self.kind == ModelKind::Mlp {
            return mlp_graph(g, p, z);
        }
        let h = self.normalized_step();
        let mut z = z;
        for _ in 0..self.substeps {
            let k1 = self.field_graph(g, p, z);
            let z2 = g.add_scaled(z, k1, 0.5 * h);
            let k2 = self.field_graph(g, p, z2);
            let z3 = g.add_scaled(z, k2, 0.5 * h);
            let k3 = self.field_graph(g, p, z3);
            let z4 = g.add_scaled(z, k3, h);
            let k4 = self.field_graph(g, p, z4);
            let s = g.add_scaled(k1, k2, 2.0);
            let s = g.add_scaled(s, k3, 2.0);
            let s = g.add(s, k4);
            z = g.add_scaled(z, s, h / 6.0);
        }
        z
    }

    /// One step on a batch of normalized rows.
    pub fn step_normalized(&self, z: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let p = self.net.leaves(&mut g);
        let zi = g.leaf(z.clone());
        let out = self.step_graph(&mut g, &p, zi);
        g.value(out).clone()
    }

    /// Field at one normalized state (HNN and NODE only).
    pub fn field_normalized(&self, z: &[f64]) -> Result<Vec<f64>> {
        if self.kind == ModelKind::Mlp {
            return Err(Error::InvalidArgument(
                "the MLP baseline has no vector field".into(),
            ));
        }
        let mut g = Graph::new();
        let p = self.net.leaves(&mut g);
        let zi = g.leaf(Matrix::from_vec(1, z.len(), z.to_vec())?);
        let f = self.field_graph(&mut g, &p, zi);
        Ok(g.value(f).data().to_vec())
    }

    /// `H_θ` at a physical state (evaluated in normalized coordinates).
    pub fn hamiltonian(&self, x: &[f64]) -> Result<f64> {
        self.require_hamiltonian()?;
        Ok(self.net.forward(&self.norm.normalize(x))?[0])
    }

    /// `∇_z H_θ(z)` at a physical state, by reverse mode on the scalar tape.
    pub fn grad_hamiltonian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.require_hamiltonian()?;
        let z = self.norm.normalize(x);
        let (_, grad) = crate::autodiff::value_and_grad(&z, |tape, vars| {
            self.net.forward_var(tape, vars)[0]
        })?;
        Ok(grad)
    }

    fn require_hamiltonian(&self) -> Result<()> {
        if self.kind.is_hamiltonian() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{} has no learned Hamiltonian",
                self.label()
            )))
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_toml()?.as_bytes())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            kind: self.kind,
            window: self.window,
            activation: "tanh".into(),
            layer_sizes: self.net.layer_sizes.clone(),
            weights: self.net.weights.iter().map(|w| w.data().to_vec()).collect(),
            biases: self.net.biases.clone(),
            norm_min: self.norm.min.clone(),
            norm_max: self.norm.max.clone(),
            time_scale: self.norm.time_scale,
            dt: self.dt,
            substeps: self.substeps,
            seed: self.seed,
            system: self.system,
        };
        toml::to_string(&file).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let f: CheckpointFile =
            toml::from_str(text).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        if f.format_version != CHECKPOINT_VERSION {
            return Err(Error::MalformedCheckpoint(format!(
                "format_version {} is not supported",
                f.format_version
            )));
        }
        if f.activation != "tanh" {
            return Err(Error::MalformedCheckpoint(format!(
                "activation {:?} is not supported",
                f.activation
            )));
        }
        let malformed = |e: Error| Error::MalformedCheckpoint(e.to_string());
        if f.weights.len() + 1 != f.layer_sizes.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "{} weight arrays for layer_sizes {:?}",
                f.weights.len(),
                f.layer_sizes
            )));
        }
        let weights = f
            .weights
            .into_iter()
            .zip(f.layer_sizes.windows(2))
            .enumerate()
            .map(|(l, (data, io))| {
                Matrix::from_vec(io[1], io[0], data).map_err(|e| {
                    Error::MalformedCheckpoint(format!("weights[{l}]: {e}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = MlpParams::from_parts(weights, f.biases).map_err(malformed)?;
        if net.layer_sizes != f.layer_sizes {
            return Err(Error::MalformedCheckpoint("layer_sizes disagree with weights".into()));
        }
        let norm = NormalizationStats::new(f.norm_min, f.norm_max, f.time_scale).map_err(malformed)?;
        let model = NeuralPredictor {
            kind: f.kind,
            window: f.window,
            net,
            norm,
            dt: f.dt,
            substeps: f.substeps,
            seed: f.seed,
            system: f.system,
        };
        model.validate().map_err(malformed)?;
        Ok(model)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    kind: ModelKind,
    window: usize,
    activation: String,
    layer_sizes: Vec<usize>,
    dt: f64,
    substeps: usize,
    seed: u64,
    time_scale: f64,
    norm_min: Vec<f64>,
    norm_max: Vec<f64>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    system: Option<SystemSpec>,
}

impl Predictor for NeuralPredictor {
    fn state_dim(&self) -> usize {
        self.norm.dim()
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step_batch(&self, xs: &Matrix) -> Result<Matrix> {
        if xs.cols() != self.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch of width {} for a model of dimension {}",
                xs.cols(),
                self.state_dim()
            )));
        }
        let z = self.norm.normalize_rows(xs);
        let out = self.norm.denormalize_rows(&self.step_normalized(&z));
        for i in 0..out.rows() {
            if !out.row(i).iter().all(|v| v.is_finite()) {
                return Err(Error::non_finite(format!("in {} step of row {i}", self.label())));
            }
        }
        Ok(out)
    }
}

/// Autoregressive rollout of `k` steps; returns `k + 1` states.
pub fn rollout<P: Predictor + ?Sized>(predictor: &P, x0: &[f64], k: usize) -> Result<Trajectory> {
    let mut out = rollout_batch(predictor, std::slice::from_ref(&x0.to_vec()), k)?;
    Ok(out.pop().unwrap())
}

/// Rolls out several initial states together, one batch per step.
pub fn rollout_batch<P: Predictor + ?Sized>(
    predictor: &P,
    x0s: &[Vec<f64>],
    k: usize,
) -> Result<Vec<Trajectory>> {
    if k == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one step".into()));
    }
    let d = predictor.state_dim();
    let rows: Vec<&[f64]> = x0s.iter().map(|x| x.as_slice()).collect();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch(format!(
            "initial states must have dimension {d}"
        )));
    }
    let mut x = Matrix::from_rows(&rows);
    let mut states: Vec<Vec<Vec<f64>>> = x0s.iter().map(|x0| vec![x0.clone()]).collect();
    for step in 0..k {
        x = predictor.step_batch(&x).map_err(|e| e.at_step(step))?;
        for (i, s) in states.iter_mut().enumerate() {
            s.push(x.row(i).to_vec());
        }
    }
    let dt = predictor.dt();
    let times: Vec<f64> = (0..=k).map(|j| j as f64 * dt).collect();
    Ok(states
        .into_iter()
        .map(|states| Trajectory {
            times: times.clone(),
            states,
        })
        .collect())
}
