//! Fixed-step time integrators.
//!
//! * [`rk4_step`]: classical explicit Runge–Kutta, used inside learned maps.
//! * [`gl4_step`]: two-stage Gauss–Legendre, solved by fixed-point iteration.
//! * [`composition_step`]: symmetric compositions of velocity-Verlet
//!   substeps for separable Hamiltonians `p²/2m + U(q)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::SystemSpec;

/// A sampled trajectory on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("empty trajectory")
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(what.to_string()))
    }
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

/// One classical RK4 step with weights (1, 2, 2, 1)/6.
pub fn rk4_step<F>(field: F, x: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let k1 = field(x)?;
    check_finite(&k1, "in RK4 stage 1")?;
    let k2 = field(&axpy(x, 0.5 * dt, &k1))?;
    check_finite(&k2, "in RK4 stage 2")?;
    let k3 = field(&axpy(x, 0.5 * dt, &k2))?;
    check_finite(&k3, "in RK4 stage 3")?;
    let k4 = field(&axpy(x, dt, &k3))?;
    check_finite(&k4, "in RK4 stage 4")?;
    let out: Vec<f64> = (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    check_finite(&out, "after RK4 step")?;
    Ok(out)
}

const SQRT3_6: f64 = 0.288_675_134_594_812_9; // √3 / 6

/// Gauss–Legendre order-4 Butcher tableau.
pub const GL4_A: [[f64; 2]; 2] = [[0.25, 0.25 - SQRT3_6], [0.25 + SQRT3_6, 0.25]];
pub const GL4_B: [f64; 2] = [0.5, 0.5];
pub const GL4_C: [f64; 2] = [0.5 - SQRT3_6, 0.5 + SQRT3_6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPoint {
    fn default() -> Self {
        FixedPoint {
            tol: 1e-12,
            max_iter: 50,
        }
    }
}

/// Result of one implicit step.
#[derive(Debug, Clone, PartialEq)]
pub struct Gl4Step {
    pub state: Vec<f64>,
    pub iterations: usize,
}

/// One GL4 step. The stage increments `Zᵢ = dt Σⱼ aᵢⱼ f(x + Zⱼ)` are iterated
/// from `Zᵢ = cᵢ dt f(x)` until the largest change is below
/// `tol · (1 + max|x|)`.
pub fn gl4_step<F>(field: F, x: &[f64], dt: f64, fp: FixedPoint) -> Result<Gl4Step>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let f0 = field(x)?;
    check_finite(&f0, "in GL4 initial field")?;
    let mut z = [axpy(&vec![0.0; n], GL4_C[0] * dt, &f0), axpy(&vec![0.0; n], GL4_C[1] * dt, &f0)];
    let scale = 1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut last = f64::INFINITY;
    for iteration in 1..=fp.max_iter {
        let k1 = field(&axpy(x, 1.0, &z[0]))?;
        let k2 = field(&axpy(x, 1.0, &z[1]))?;
        check_finite(&k1, "in GL4 stage 1")?;
        check_finite(&k2, "in GL4 stage 2")?;
        let mut change = 0.0_f64;
        for (s, zs) in z.iter_mut().enumerate() {
            for i in 0..n {
                let new = dt * (GL4_A[s][0] * k1[i] + GL4_A[s][1] * k2[i]);
                change = change.max((new - zs[i]).abs());
                zs[i] = new;
            }
        }
        last = change;
        if change <= fp.tol * scale {
            let k1 = field(&axpy(x, 1.0, &z[0]))?;
            let k2 = field(&axpy(x, 1.0, &z[1]))?;
            let state: Vec<f64> = (0..n)
                .map(|i| x[i] + dt * (GL4_B[0] * k1[i] + GL4_B[1] * k2[i]))
                .collect();
            check_finite(&state, "after GL4 step")?;
            return Ok(Gl4Step { state, iterations: iteration });
        }
    }
    Err(Error::FixedPointDiverged {
        iterations: fp.max_iter,
        tol: fp.tol,
        last,
    })
}

/// Named composition tables. Each is a symmetric list of substep weights
/// summing to one, applied to a second-order leapfrog base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionTable {
    Leapfrog,
    Yoshida4,
    Yoshida6,
    KahanLi8,
}

impl CompositionTable {
    pub fn order(self) -> u32 {
        match self {
            CompositionTable::Leapfrog => 2,
            CompositionTable::Yoshida4 => 4,
            CompositionTable::Yoshida6 => 6,
            CompositionTable::KahanLi8 => 8,
        }
    }

    pub fn coefficients(self) -> Vec<f64> {
        match self {
            CompositionTable::Leapfrog => vec![1.0],
            CompositionTable::Yoshida4 => {
                let cbrt2 = 2f64.cbrt();
                let w1 = 1.0 / (2.0 - cbrt2);
                let w0 = -cbrt2 / (2.0 - cbrt2);
                vec![w1, w0, w1]
            }
            CompositionTable::Yoshida6 => {
                let w1 = -1.177_679_984_178_87;
                let w2 = 0.235_573_213_359_357;
                let w3 = 0.784_513_610_477_560;
                let w0 = 1.0 - 2.0 * (w1 + w2 + w3);
                vec![w3, w2, w1, w0, w1, w2, w3]
            }
            CompositionTable::KahanLi8 => symmetric(&KAHAN_LI_8_HALF, KAHAN_LI_8_MID),
        }
    }
}

// s17odr8a, stages 1..8; stage 9 is the middle and 10..17 mirror 8..1.
const KAHAN_LI_8_HALF: [f64; 8] = [
    0.130_202_483_088_890_08,
    0.561_162_981_775_108_4,
    -0.389_474_962_644_847_3,
    0.158_841_906_555_155_6,
    -0.395_903_894_133_237_6,
    0.184_539_640_978_315_7,
    0.258_374_387_686_322_05,
    0.295_011_723_609_310_3,
];
const KAHAN_LI_8_MID: f64 = -0.605_508_533_830_034_5;

fn symmetric(half: &[f64], mid: f64) -> Vec<f64> {
    let mut v = half.to_vec();
    v.push(mid);
    v.extend(half.iter().rev());
    v
}

/// One step of the composition `∏ leapfrog(γᵢ dt)`.
pub fn composition_step(
    system: &SystemSpec,
    x: &[f64],
    dt: f64,
    coefficients: &[f64],
) -> Result<Vec<f64>> {
    let n = system.dof();
    if x.len() != 2 * n {
        return Err(Error::DimensionMismatch(format!(
            "state of length {} for a system with {n} degrees of freedom",
            x.len()
        )));
    }
    let m = system.mass();
    let mut q = x[..n].to_vec();
    let mut p = x[n..].to_vec();
    let mut force = system.grad_potential(&q)?;
    for &gamma in coefficients {
        let h = gamma * dt;
        for i in 0..n {
            p[i] -= 0.5 * h * force[i];
        }
        for i in 0..n {
            q[i] += h * p[i] / m;
        }
        force = system.grad_potential(&q)?;
        for i in 0..n {
            p[i] -= 0.5 * h * force[i];
        }
    }
    q.extend_from_slice(&p);
    check_finite(&q, "after composition step")?;
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepperKind {
    Rk4,
    Gl4 {
        #[serde(default = "default_fp_tol")]
        fp_tol: f64,
        #[serde(default = "default_fp_max_iter")]
        fp_max_iter: usize,
    },
    Composition {
        table: CompositionTable,
    },
}

fn default_fp_tol() -> f64 {
    FixedPoint::default().tol
}

fn default_fp_max_iter() -> usize {
    FixedPoint::default().max_iter
}

/// A stepper together with its internal substep count. `propagate` samples
/// every `dt`; each sample interval is covered by `substeps` equal steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepperSpec {
    #[serde(flatten)]
    pub kind: StepperKind,
    #[serde(default = "one")]
    pub substeps: usize,
}

fn one() -> usize {
    1
}

impl StepperSpec {
    pub fn rk4() -> Self {
        StepperSpec {
            kind: StepperKind::Rk4,
            substeps: 1,
        }
    }

    pub fn gl4() -> Self {
        StepperSpec {
            kind: StepperKind::Gl4 {
                fp_tol: default_fp_tol(),
                fp_max_iter: default_fp_max_iter(),
            },
            substeps: 1,
        }
    }

    pub fn composition(table: CompositionTable) -> Self {
        StepperSpec {
            kind: StepperKind::Composition { table },
            substeps: 1,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::ConfigInvalid("substeps must be at least 1".into()));
        }
        match &self.kind {
            StepperKind::Rk4 => Ok(()),
            StepperKind::Gl4 { fp_tol, fp_max_iter } => {
                if *fp_tol > 0.0 && *fp_max_iter > 0 {
                    Ok(())
                } else {
                    Err(Error::ConfigInvalid(
                        "GL4 needs fp_tol > 0 and fp_max_iter > 0".into(),
                    ))
                }
            }
            StepperKind::Composition { table } => {
                let sum: f64 = table.coefficients().iter().sum();
                if (sum - 1.0).abs() <= 1e-12 {
                    Ok(())
                } else {
                    Err(Error::ConfigInvalid(format!(
                        "composition coefficients sum to {sum}"
                    )))
                }
            }
        }
    }

    /// Advances `x` by one step of size `h` (no substepping).
    pub fn step(&self, system: &SystemSpec, x: &[f64], h: f64) -> Result<Vec<f64>> {
        match &self.kind {
            StepperKind::Rk4 => rk4_step(|s| system.vector_field(s), x, h),
            StepperKind::Gl4 {
                fp_tol,
                fp_max_iter,
            } => gl4_step(
                |s| system.vector_field(s),
                x,
                h,
                FixedPoint {
                    tol: *fp_tol,
                    max_iter: *fp_max_iter,
                },
            )
            .map(|s| s.state),
            StepperKind::Composition { table } => {
                composition_step(system, x, h, &table.coefficients())
            }
        }
    }
}

/// Samples `n_steps + 1` states at `t0 + k·dt`.
pub fn propagate_from(
    stepper: &StepperSpec,
    system: &SystemSpec,
    x0: &[f64],
    t0: f64,
    dt: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    stepper.validate()?;
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    if !(dt.is_finite() && dt != 0.0) {
        return Err(Error::InvalidArgument(format!("invalid step size {dt}")));
    }
    let h = dt / stepper.substeps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut x = x0.to_vec();
    states.push(x.clone());
    for k in 0..n_steps {
        for _ in 0..stepper.substeps {
            x = stepper
                .step(system, &x, h)
                .map_err(|e| e.at_step(k))?;
        }
        states.push(x.clone());
    }
    let times = (0..=n_steps).map(|k| t0 + k as f64 * dt).collect();
    Ok(Trajectory { times, states })
}

pub fn propagate(
    stepper: &StepperSpec,
    system: &SystemSpec,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    propagate_from(stepper, system, x0, 0.0, dt, n_steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oscillator(t: f64) -> [f64; 2] {
        let w = 5f64.sqrt();
        [(w * t).cos(), -w * (w * t).sin()]
    }

    #[test]
    fn rk4_zero_field_and_exponential() {
        let x = [0.3, -1.2];
        let y = rk4_step(|s| Ok(vec![0.0; s.len()]), &x, 0.5).unwrap();
        assert_eq!(y, x.to_vec());
        let y = rk4_step(|s| Ok(s.to_vec()), &[1.0], 0.1).unwrap();
        let h: f64 = 0.1;
        let taylor = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((y[0] - taylor).abs() < 1e-15);
        assert!((y[0] - 1.105_170_833_333_333).abs() < 1e-15);
    }

    #[test]
    fn rk4_non_finite_stage() {
        let err = rk4_step(|s| Ok(vec![1.0 / (s[0] - 1.0)]), &[1.0], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { .. }));
    }

    #[test]
    fn rk4_oscillator_thousand_steps() {
        let sys = SystemSpec::mass_spring();
        let traj = propagate(&StepperSpec::rk4(), &sys, &[1.0, 0.0], 0.01, 1000).unwrap();
        let exact = oscillator(10.0);
        assert!((traj.last()[0] - exact[0]).abs() < 1e-6);
        assert!((traj.last()[1] - exact[1]).abs() < 1e-6);
    }

    #[test]
    fn gl4_zero_field_converges_immediately() {
        let x = [0.4, 0.7];
        let s = gl4_step(|v| Ok(vec![0.0; v.len()]), &x, 0.1, FixedPoint::default()).unwrap();
        assert_eq!(s.state, x.to_vec());
        assert_eq!(s.iterations, 1);
    }

    #[test]
    fn gl4_linear_is_pade() {
        let s = gl4_step(|v| Ok(v.to_vec()), &[1.0], 0.1, FixedPoint::default()).unwrap();
        let z: f64 = 0.1;
        let pade = (1.0 + z / 2.0 + z * z / 12.0) / (1.0 - z / 2.0 + z * z / 12.0);
        assert!((s.state[0] - pade).abs() < 1e-13);
        assert!((s.state[0] - 1.105_170_902_7).abs() < 1e-10);
    }

    #[test]
    fn gl4_divergence_is_reported() {
        let fp = FixedPoint { tol: 1e-12, max_iter: 5 };
        let err = gl4_step(|v| Ok(v.iter().map(|x| 50.0 * x).collect()), &[1.0], 0.1, fp);
        assert!(matches!(err, Err(Error::FixedPointDiverged { iterations: 5, .. })));
    }

    #[test]
    fn composition_tables_sum_to_one() {
        for t in [
            CompositionTable::Leapfrog,
            CompositionTable::Yoshida4,
            CompositionTable::Yoshida6,
            CompositionTable::KahanLi8,
        ] {
            let c = t.coefficients();
            let sum: f64 = c.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "{t:?}: {sum}");
            let rev: Vec<f64> = c.iter().rev().copied().collect();
            assert_eq!(c, rev, "{t:?} is not symmetric");
        }
        assert_eq!(CompositionTable::KahanLi8.coefficients().len(), 17);
    }

    #[test]
    fn composition_is_time_reversible() {
        let sys = SystemSpec::earth_j2();
        let x = [7000.0, 100.0, 300.0, 0.1, 7.4, 1.0];
        for t in [CompositionTable::Leapfrog, CompositionTable::KahanLi8] {
            let c = t.coefficients();
            let fwd = composition_step(&sys, &x, 10.0, &c).unwrap();
            let back = composition_step(&sys, &fwd, -10.0, &c).unwrap();
            for (a, b) in back.iter().zip(&x) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn leapfrog_energy_bounded() {
        let sys = SystemSpec::mass_spring();
        let stepper = StepperSpec::composition(CompositionTable::Leapfrog);
        let traj = propagate(&stepper, &sys, &[1.0, 0.0], 0.01, 10_000).unwrap();
        let h0 = sys.hamiltonian(&traj.states[0]).unwrap();
        let errs: Vec<f64> = traj
            .states
            .iter()
            .map(|s| (sys.hamiltonian(s).unwrap() - h0).abs() / h0)
            .collect();
        let max = errs.iter().cloned().fold(0.0, f64::max);
        // O((ωh)²) oscillation, no growth between the first and last quarter
        assert!(max < 1e-3);
        let q1 = errs[..2500].iter().cloned().fold(0.0, f64::max);
        let q4 = errs[7500..].iter().cloned().fold(0.0, f64::max);
        assert!(q4 < 1.1 * q1);
    }

    #[test]
    fn propagate_shapes_and_continuation() {
        let sys = SystemSpec::mass_spring();
        let st = StepperSpec::gl4();
        let one = propagate(&st, &sys, &[0.5, 0.5], 0.01, 1).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one.states[1], st.step(&sys, &[0.5, 0.5], 0.01).unwrap());
        let full = propagate(&st, &sys, &[0.5, 0.5], 0.01, 1000).unwrap();
        assert_eq!(full.len(), 1001);
        let a = propagate(&st, &sys, &[0.5, 0.5], 0.01, 400).unwrap();
        let b = propagate_from(&st, &sys, a.last(), a.times[400], 0.01, 600).unwrap();
        assert_eq!(&full.states[400..], &b.states[..]);
        assert!(propagate(&st, &sys, &[0.5, 0.5], 0.01, 0).is_err());
    }

    #[test]
    fn propagate_reports_failing_step() {
        let sys = SystemSpec::earth_j2();
        let st = StepperSpec::rk4();
        let err = propagate(&st, &sys, &[0.0; 6], 1.0, 3).unwrap_err();
        assert!(matches!(err, Error::StepFailed { step: 0, .. }));
    }
}
