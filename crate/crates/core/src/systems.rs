//! Ground-truth Hamiltonian systems and observation models.
//!
//! States are flat `[q₁..qₙ, p₁..pₙ]` slices. Mass-spring is in SI units;
//! orbits use km, km/s and seconds with a 1 kg satellite so momentum is
//! numerically velocity.

use std::cell::RefCell;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, dot, mat_vec, norm, Matrix};

/// Earth gravitational parameter, km³/s².
pub const MU_EARTH: f64 = 398_600.4418;
/// Earth equatorial radius, km.
pub const R_EQ_EARTH: f64 = 6378.1363;
pub const J2_EARTH: f64 = 1.0826e-3;

/// Generalized coordinates and conjugate momenta.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhaseState {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.len() != p.len() {
            return Err(Error::DimensionMismatch(format!(
                "q has {} components, p has {}",
                q.len(),
                p.len()
            )));
        }
        if q.iter().chain(&p).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("in phase state"));
        }
        Ok(PhaseState { q, p })
    }

    pub fn from_flat(x: &[f64]) -> Result<Self> {
        if !x.len().is_multiple_of(2) {
            return Err(Error::DimensionMismatch(format!(
                "phase state needs an even length, got {}",
                x.len()
            )));
        }
        let n = x.len() / 2;
        PhaseState::new(x[..n].to_vec(), x[n..].to_vec())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.q.clone();
        v.extend_from_slice(&self.p);
        v
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SystemSpec {
    MassSpring { k: f64, m: f64 },
    TwoBodyJ2 { mu: f64, r_eq: f64, j2: f64, m: f64 },
}

impl SystemSpec {
    pub fn mass_spring() -> Self {
        SystemSpec::MassSpring { k: 5.0, m: 1.0 }
    }

    pub fn earth_j2() -> Self {
        SystemSpec::TwoBodyJ2 {
            mu: MU_EARTH,
            r_eq: R_EQ_EARTH,
            j2: J2_EARTH,
            m: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SystemSpec::MassSpring { k, m } => k > 0.0 && m > 0.0,
            SystemSpec::TwoBodyJ2 { mu, r_eq, j2, m } => {
                mu > 0.0 && r_eq > 0.0 && j2 >= 0.0 && m > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!(
                "system parameters out of range: {self:?}"
            )))
        }
    }

    /// Degrees of freedom n (the state has 2n components).
    pub fn dof(&self) -> usize {
        match self {
            SystemSpec::MassSpring { .. } => 1,
            SystemSpec::TwoBodyJ2 { .. } => 3,
        }
    }

    pub fn mass(&self) -> f64 {
        match *self {
            SystemSpec::MassSpring { m, .. } | SystemSpec::TwoBodyJ2 { m, .. } => m,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SystemSpec::MassSpring { .. } => "mass_spring",
            SystemSpec::TwoBodyJ2 { .. } => "two_body_j2",
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != 2 * self.dof() {
            return Err(Error::DimensionMismatch(format!(
                "{} state has {} components, got {}",
                self.label(),
                2 * self.dof(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn kinetic(&self, p: &[f64]) -> f64 {
        dot(p, p) / (2.0 * self.mass())
    }

    pub fn potential(&self, q: &[f64]) -> Result<f64> {
        match *self {
            SystemSpec::MassSpring { k, .. } => Ok(0.5 * k * dot(q, q)),
            SystemSpec::TwoBodyJ2 { .. } => zonal_potential(self, q),
        }
    }

    pub fn hamiltonian(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let n = self.dof();
        Ok(self.kinetic(&x[n..]) + self.potential(&x[..n])?)
    }

    /// ∂U/∂q.
    pub fn grad_potential(&self, q: &[f64]) -> Result<Vec<f64>> {
        match *self {
            SystemSpec::MassSpring { k, .. } => Ok(q.iter().map(|v| k * v).collect()),
            SystemSpec::TwoBodyJ2 { .. } => zonal_gradient(self, q),
        }
    }

    /// ∇H = (∂H/∂q, ∂H/∂p).
    pub fn grad_hamiltonian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let n = self.dof();
        let m = self.mass();
        let mut g = self.grad_potential(&x[..n])?;
        g.extend(x[n..].iter().map(|p| p / m));
        Ok(g)
    }

    /// Hamilton's equations J∇H = (∂H/∂p, −∂H/∂q).
    pub fn vector_field(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let n = self.dof();
        let m = self.mass();
        let gq = self.grad_potential(&x[..n])?;
        let mut f: Vec<f64> = x[n..].iter().map(|p| p / m).collect();
        f.extend(gq.iter().map(|g| -g));
        Ok(f)
    }
}

/// J2-truncated zonal potential `U = −(μ m / r)·[1 − (r_eq/r)² J₂ P₂(z/r)]`.
pub fn zonal_potential(spec: &SystemSpec, q: &[f64]) -> Result<f64> {
    let SystemSpec::TwoBodyJ2 { mu, r_eq, j2, m } = *spec else {
        return Err(Error::InvalidArgument(
            "zonal potential needs a two-body system".into(),
        ));
    };
    check_orbit_position(q)?;
    let r = norm(q);
    let s = q[2] / r;
    let p2 = 0.5 * (3.0 * s * s - 1.0);
    let ratio = r_eq / r;
    Ok(-(mu * m / r) * (1.0 - ratio * ratio * j2 * p2))
}

fn check_orbit_position(q: &[f64]) -> Result<()> {
    if q.len() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "orbit position has 3 components, got {}",
            q.len()
        )));
    }
    if q.iter().all(|&v| v == 0.0) {
        return Err(Error::SingularRadius);
    }
    Ok(())
}

/// The zonal potential recorded on a tape; shares its formula with
/// [`zonal_potential`].
pub fn zonal_potential_var<'t>(spec: &SystemSpec, q: &[Var<'t>]) -> Var<'t> {
    let SystemSpec::TwoBodyJ2 { mu, r_eq, j2, m } = *spec else {
        panic!("zonal potential needs a two-body system");
    };
    let r2 = q[0].square() + q[1].square() + q[2].square();
    let r = r2.sqrt();
    let s = q[2] / r;
    let p2 = (s.square() * 3.0 - 1.0) * 0.5;
    let ratio = r_eq / r;
    let bracket = 1.0 - ratio.square() * p2 * j2;
    (-(mu * m) / r) * bracket
}

thread_local! {
    static POTENTIAL_TAPE: RefCell<Tape> = RefCell::new(Tape::with_capacity(64));
}

fn zonal_gradient(spec: &SystemSpec, q: &[f64]) -> Result<Vec<f64>> {
    check_orbit_position(q)?;
    POTENTIAL_TAPE.with(|cell| {
        let mut tape = cell.borrow_mut();
        tape.clear();
        let tape: &Tape = &tape;
        let vars: Vec<Var<'_>> = q.iter().map(|&v| tape.input(v)).collect();
        let u = zonal_potential_var(spec, &vars);
        tape.check_finite()?;
        Ok(tape.gradient(u, &vars))
    })
}

/// Linear observation map `y = H x + η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObservationKind {
    PositionOnly,
    FullState,
    Linear(Matrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSpec {
    pub kind: ObservationKind,
    pub noise_cov: Matrix,
}

impl ObservationSpec {
    pub fn new(kind: ObservationKind, noise_cov: Matrix) -> Self {
        ObservationSpec { kind, noise_cov }
    }

    pub fn position_only(dof: usize, sigma: f64) -> Self {
        ObservationSpec {
            kind: ObservationKind::PositionOnly,
            noise_cov: Matrix::identity(dof).scale(sigma * sigma),
        }
    }

    pub fn full_state(dim: usize, sigma: f64) -> Self {
        ObservationSpec {
            kind: ObservationKind::FullState,
            noise_cov: Matrix::identity(dim).scale(sigma * sigma),
        }
    }

    pub fn output_dim(&self, state_dim: usize) -> usize {
        match &self.kind {
            ObservationKind::PositionOnly => state_dim / 2,
            ObservationKind::FullState => state_dim,
            ObservationKind::Linear(h) => h.rows(),
        }
    }

    /// The observation matrix H for a state of `state_dim` components.
    pub fn matrix(&self, state_dim: usize) -> Matrix {
        match &self.kind {
            ObservationKind::PositionOnly => {
                let n = state_dim / 2;
                let mut h = Matrix::zeros(n, state_dim);
                for i in 0..n {
                    h[(i, i)] = 1.0;
                }
                h
            }
            ObservationKind::FullState => Matrix::identity(state_dim),
            ObservationKind::Linear(h) => h.clone(),
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if let ObservationKind::Linear(h) = &self.kind {
            if h.cols() != state_dim {
                return Err(Error::DimensionMismatch(format!(
                    "observation matrix has {} columns for a {}-dimensional state",
                    h.cols(),
                    state_dim
                )));
            }
        }
        if matches!(self.kind, ObservationKind::PositionOnly) && !state_dim.is_multiple_of(2) {
            return Err(Error::DimensionMismatch(
                "position-only observation of an odd-dimensional state".into(),
            ));
        }
        let no = self.output_dim(state_dim);
        if self.noise_cov.rows() != no || self.noise_cov.cols() != no {
            return Err(Error::DimensionMismatch(format!(
                "noise covariance is {}x{}, observation has {} components",
                self.noise_cov.rows(),
                self.noise_cov.cols(),
                no
            )));
        }
        Ok(())
    }

    /// Noise-free observation H(x).
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            ObservationKind::PositionOnly => {
                if !x.len().is_multiple_of(2) {
                    return Err(Error::DimensionMismatch(format!(
                        "position-only observation of a {}-dimensional state",
                        x.len()
                    )));
                }
                Ok(x[..x.len() / 2].to_vec())
            }
            ObservationKind::FullState => Ok(x.to_vec()),
            ObservationKind::Linear(h) => mat_vec(h, x),
        }
    }

    /// H(x) plus a Gaussian draw from the noise covariance.
    pub fn observe<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.validate(x.len())?;
        let mut y = self.apply(x)?;
        if self.noise_cov.data().iter().all(|&v| v == 0.0) {
            return Ok(y);
        }
        let l = cholesky_lower(&self.noise_cov)?;
        let z: Vec<f64> = (0..y.len()).map(|_| rng.sample(StandardNormal)).collect();
        let noise = mat_vec(&l, &z)?;
        for (yi, ni) in y.iter_mut().zip(noise) {
            *yi += ni;
        }
        Ok(y)
    }
}

/// Classical orbital elements with angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitalElements {
    pub semi_major_axis: f64,
    pub eccentricity: f64,
    pub inclination: f64,
    pub raan: f64,
    pub arg_periapsis: f64,
    pub true_anomaly: f64,
}

impl OrbitalElements {
    /// Elements from periapsis altitude above the equatorial radius.
    pub fn from_periapsis_altitude(
        altitude: f64,
        eccentricity: f64,
        inclination: f64,
        raan: f64,
        arg_periapsis: f64,
        true_anomaly: f64,
    ) -> Self {
        let rp = R_EQ_EARTH + altitude;
        OrbitalElements {
            semi_major_axis: rp / (1.0 - eccentricity),
            eccentricity,
            inclination,
            raan,
            arg_periapsis,
            true_anomaly,
        }
    }

    pub fn period(&self, mu: f64) -> f64 {
        2.0 * PI * (self.semi_major_axis.powi(3) / mu).sqrt()
    }

    /// Inertial position and velocity for a unit-mass satellite.
    pub fn to_state(&self, mu: f64) -> Vec<f64> {
        let e = self.eccentricity;
        let slr = self.semi_major_axis * (1.0 - e * e);
        let nu = self.true_anomaly;
        let r = slr / (1.0 + e * nu.cos());
        let pf_r = [r * nu.cos(), r * nu.sin(), 0.0];
        let vs = (mu / slr).sqrt();
        let pf_v = [-vs * nu.sin(), vs * (e + nu.cos()), 0.0];
        let (so, co) = self.raan.sin_cos();
        let (si, ci) = self.inclination.sin_cos();
        let (sw, cw) = self.arg_periapsis.sin_cos();
        // perifocal → inertial: R3(−Ω) R1(−i) R3(−ω)
        let rot = [
            [co * cw - so * sw * ci, -co * sw - so * cw * ci, so * si],
            [so * cw + co * sw * ci, -so * sw + co * cw * ci, -co * si],
            [sw * si, cw * si, ci],
        ];
        let apply = |v: [f64; 3]| -> [f64; 3] {
            let mut o = [0.0; 3];
            for (i, row) in rot.iter().enumerate() {
                o[i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            }
            o
        };
        let mut x = apply(pf_r).to_vec();
        x.extend_from_slice(&apply(pf_v));
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point_mass() -> SystemSpec {
        SystemSpec::TwoBodyJ2 {
            mu: MU_EARTH,
            r_eq: R_EQ_EARTH,
            j2: 0.0,
            m: 1.0,
        }
    }

    #[test]
    fn mass_spring_energy_and_field() {
        let s = SystemSpec::mass_spring();
        assert_eq!(s.hamiltonian(&[1.0, 0.0]).unwrap(), 2.5);
        assert_eq!(s.hamiltonian(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(s.vector_field(&[1.0, 0.0]).unwrap(), vec![0.0, -5.0]);
        assert_eq!(s.vector_field(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            s.hamiltonian(&[1.0, 0.0, 0.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn circular_point_mass_energy() {
        let s = point_mass();
        let r = 7000.0;
        let v = (MU_EARTH / r).sqrt();
        let h = s.hamiltonian(&[r, 0.0, 0.0, 0.0, v, 0.0]).unwrap();
        assert!((h - (v * v / 2.0 - MU_EARTH / r)).abs() < 1e-12);
        assert!((h + MU_EARTH / (2.0 * r)).abs() < 1e-12);
    }

    #[test]
    fn point_mass_field_is_central() {
        let s = point_mass();
        let (r, v) = (7000.0, 7.5);
        let f = s.vector_field(&[r, 0.0, 0.0, 0.0, v, 0.0]).unwrap();
        let expect = [0.0, v, 0.0, -MU_EARTH / (r * r), 0.0, 0.0];
        for (a, e) in f.iter().zip(expect) {
            assert!((a - e).abs() <= 1e-15 * e.abs().max(1.0), "{a} vs {e}");
        }
    }

    #[test]
    fn zonal_potential_closed_forms() {
        let pm = point_mass();
        let u = zonal_potential(&pm, &[R_EQ_EARTH, 0.0, 0.0]).unwrap();
        assert_eq!(u, -MU_EARTH / R_EQ_EARTH);

        let s = SystemSpec::earth_j2();
        let r = 8000.0;
        let ratio2 = (R_EQ_EARTH / r).powi(2);
        let eq = zonal_potential(&s, &[r / 2f64.sqrt(), r / 2f64.sqrt(), 0.0]).unwrap();
        let eq_expect = -(MU_EARTH / r) * (1.0 + J2_EARTH * ratio2 / 2.0);
        assert!(((eq - eq_expect) / eq_expect).abs() < 1e-12);
        let polar = zonal_potential(&s, &[0.0, 0.0, r]).unwrap();
        let polar_expect = -(MU_EARTH / r) * (1.0 - J2_EARTH * ratio2);
        assert!(((polar - polar_expect) / polar_expect).abs() < 1e-12);

        assert_eq!(zonal_potential(&s, &[0.0; 3]), Err(Error::SingularRadius));
        assert_eq!(s.vector_field(&[0.0; 6]), Err(Error::SingularRadius));
    }

    #[test]
    fn j2_gradient_matches_finite_differences() {
        let s = SystemSpec::earth_j2();
        let q = [5000.0, -3000.0, 4200.0];
        let g = s.grad_potential(&q).unwrap();
        for i in 0..3 {
            let h = 1e-3;
            let mut a = q;
            let mut b = q;
            a[i] += h;
            b[i] -= h;
            let fd = (s.potential(&a).unwrap() - s.potential(&b).unwrap()) / (2.0 * h);
            assert!(((g[i] - fd) / fd).abs() < 1e-7, "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn observations() {
        let x = [0.3, -0.2, 1.5, 2.5];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos = ObservationSpec::position_only(2, 0.0);
        assert_eq!(pos.observe(&x, &mut rng).unwrap(), vec![0.3, -0.2]);
        let full = ObservationSpec::full_state(4, 0.0);
        assert_eq!(full.observe(&x, &mut rng).unwrap(), x.to_vec());
        assert!(matches!(
            pos.observe(&[1.0, 2.0], &mut rng),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn observation_noise_mean() {
        let sigma = 0.5;
        let obs = ObservationSpec::position_only(2, sigma);
        let x = [1.0, -2.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let y = obs.observe(&x, &mut rng).unwrap();
            mean[0] += y[0] / n as f64;
            mean[1] += y[1] / n as f64;
        }
        let bound = 4.0 * sigma / (n as f64).sqrt();
        assert!((mean[0] - 1.0).abs() < bound);
        assert!((mean[1] + 2.0).abs() < bound);
    }

    #[test]
    fn periapsis_geometry() {
        let el = OrbitalElements::from_periapsis_altitude(540.0, 0.7, 1.1, 0.3, 2.0, 0.0);
        assert!((el.semi_major_axis * 0.3 - 6918.1363).abs() < 1e-9);
        assert!((el.semi_major_axis - 23060.4543333).abs() < 1e-6);
        let x = el.to_state(MU_EARTH);
        assert!((norm(&x[..3]) - 6918.1363).abs() < 1e-8);
        // at periapsis the velocity is perpendicular to the radius
        assert!(dot(&x[..3], &x[3..]).abs() < 1e-8);
        let v_expect = (MU_EARTH * 1.7 / 6918.1363).sqrt();
        assert!((norm(&x[3..]) - v_expect).abs() < 1e-10);
        // inclination from the angular momentum direction
        let h = [
            x[1] * x[5] - x[2] * x[4],
            x[2] * x[3] - x[0] * x[5],
            x[0] * x[4] - x[1] * x[3],
        ];
        assert!(((h[2] / norm(&h)).acos() - 1.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn field_is_orthogonal_to_gradient(
            q in proptest::collection::vec(-8000.0f64..8000.0, 3),
            p in proptest::collection::vec(-8.0f64..8.0, 3),
        ) {
            prop_assume!(norm(&q) > 100.0);
            let s = SystemSpec::earth_j2();
            let mut x = q.clone();
            x.extend_from_slice(&p);
            let g = s.grad_hamiltonian(&x).unwrap();
            let f = s.vector_field(&x).unwrap();
            // ⟨∇H, J∇H⟩ cancels term by term: gq·gp − gp·gq
            let scale = norm(&g) * norm(&f);
            prop_assert!(dot(&g, &f).abs() <= 1e-15 * scale);
            // momentum block is p/m exactly
            prop_assert_eq!(&f[..3], &p[..]);
        }

        #[test]
        fn point_mass_limit_is_exact(q in proptest::collection::vec(-9000.0f64..9000.0, 3)) {
            prop_assume!(norm(&q) > 1.0);
            let u = zonal_potential(&point_mass(), &q).unwrap();
            prop_assert_eq!(u, -MU_EARTH / norm(&q));
        }

        #[test]
        fn axial_symmetry(
            q in proptest::collection::vec(-9000.0f64..9000.0, 3),
            psi in 0.0f64..(2.0 * PI),
        ) {
            prop_assume!(norm(&q) > 1.0);
            let s = SystemSpec::earth_j2();
            let (sn, cs) = psi.sin_cos();
            let rq = [cs * q[0] - sn * q[1], sn * q[0] + cs * q[1], q[2]];
            let a = zonal_potential(&s, &q).unwrap();
            let b = zonal_potential(&s, &rq).unwrap();
            prop_assert!(((a - b) / a).abs() <= 1e-12);
        }
    }
}
