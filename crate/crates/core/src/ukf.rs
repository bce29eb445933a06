//! Unscented Kalman filter around an arbitrary one-step predictor.
//!
//! Process noise is additive: `Σ_ω` is added to the predicted covariance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, is_symmetric, mat_mat, mat_vec, solve_spd, symmetrize, Matrix};
use crate::models::Predictor;
use crate::systems::ObservationSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtConfig {
    fn default() -> Self {
        UtConfig {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl UtConfig {
    /// `λ = α²(L + κ) − L`.
    pub fn lambda(&self, l: usize) -> f64 {
        let l = l as f64;
        self.alpha * self.alpha * (l + self.kappa) - l
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha.is_finite() && self.beta.is_finite() && self.kappa.is_finite() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("invalid unscented parameters {self:?}")))
        }
    }
}

/// Mean and SPD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl GaussianBelief {
    pub fn new(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        if cov.rows() != mean.len() || cov.cols() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean of length {} with a {}x{} covariance",
                mean.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        if !mean.iter().all(|v| v.is_finite()) || !cov.is_finite() {
            return Err(Error::non_finite("in belief"));
        }
        if !is_symmetric(&cov, 1e-10) {
            return Err(Error::InvalidArgument("belief covariance is not symmetric".into()));
        }
        cholesky_lower(&cov)?;
        Ok(GaussianBelief { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPointSet {
    pub points: Vec<Vec<f64>>,
    pub w_mean: Vec<f64>,
    pub w_cov: Vec<f64>,
}

impl SigmaPointSet {
    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// `X₀ + Σ Wᵢ(Xᵢ − X₀)`, which equals `Σ WᵢXᵢ` because the weights sum
    /// to one and avoids cancelling the large `W₀` for small `α`.
    pub fn mean(&self) -> Vec<f64> {
        weighted_mean(&self.points, &self.w_mean)
    }
}

fn weighted_mean(points: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let x0 = &points[0];
    let mut m = x0.clone();
    for (p, wi) in points.iter().zip(w).skip(1) {
        for (mj, (pj, x0j)) in m.iter_mut().zip(p.iter().zip(x0)) {
            *mj += wi * (pj - x0j);
        }
    }
    m
}

/// `Σ Wᵢ (aᵢ − ā)(bᵢ − b̄)ᵀ`.
fn weighted_cross(a: &[Vec<f64>], am: &[f64], b: &[Vec<f64>], bm: &[f64], w: &[f64]) -> Matrix {
    let (r, c) = (am.len(), bm.len());
    let mut out = Matrix::zeros(r, c);
    let data = out.data_mut();
    for ((ai, bi), wi) in a.iter().zip(b).zip(w) {
        for i in 0..r {
            let da = wi * (ai[i] - am[i]);
            for j in 0..c {
                data[i * c + j] += da * (bi[j] - bm[j]);
            }
        }
    }
    out
}

/// `2L + 1` points: the mean and the mean ± each column of
/// `chol((L + λ)P)`.
pub fn make_sigma_points(belief: &GaussianBelief, ut: &UtConfig) -> Result<SigmaPointSet> {
    ut.validate()?;
    let l = belief.dim();
    let lambda = ut.lambda(l);
    let s = l as f64 + lambda;
    if !(s > 0.0) {
        return Err(Error::NegativeScaledCov(s));
    }
    let chol = cholesky_lower(&belief.cov.scale(s))?;
    let mut points = Vec::with_capacity(2 * l + 1);
    points.push(belief.mean.clone());
    for sign in [1.0, -1.0] {
        for i in 0..l {
            points.push(
                belief
                    .mean
                    .iter()
                    .enumerate()
                    .map(|(j, m)| m + sign * chol[(j, i)])
                    .collect(),
            );
        }
    }
    let w0m = lambda / s;
    let w0c = w0m + (1.0 - ut.alpha * ut.alpha + ut.beta);
    let wi = 1.0 / (2.0 * s);
    let mut w_mean = vec![wi; 2 * l + 1];
    let mut w_cov = vec![wi; 2 * l + 1];
    w_mean[0] = w0m;
    w_cov[0] = w0c;
    Ok(SigmaPointSet {
        points,
        w_mean,
        w_cov,
    })
}

/// Pushes every point through the predictor and recombines.
pub fn ut_predict<P: Predictor + ?Sized>(
    points: &SigmaPointSet,
    predictor: &P,
    process_noise: &Matrix,
) -> Result<(GaussianBelief, SigmaPointSet)> {
    let l = points.dim();
    if predictor.state_dim() != l {
        return Err(Error::DimensionMismatch(format!(
            "predictor of dimension {} for a belief of dimension {l}",
            predictor.state_dim()
        )));
    }
    if process_noise.rows() != l || process_noise.cols() != l {
        return Err(Error::DimensionMismatch(format!(
            "process noise is {}x{}, state has {l} components",
            process_noise.rows(),
            process_noise.cols()
        )));
    }
    let rows: Vec<&[f64]> = points.points.iter().map(|p| p.as_slice()).collect();
    let stepped = predictor.step_batch(&Matrix::from_rows(&rows))?;
    let propagated: Vec<Vec<f64>> = (0..stepped.rows()).map(|i| stepped.row(i).to_vec()).collect();
    for (i, p) in propagated.iter().enumerate() {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite(format!("in propagated sigma point {i}")));
        }
    }
    let mean = weighted_mean(&propagated, &points.w_mean);
    let mut cov = weighted_cross(&propagated, &mean, &propagated, &mean, &points.w_cov);
    cov.add_scaled_in_place(1.0, process_noise)?;
    let cov = symmetrize(&cov)?;
    let set = SigmaPointSet {
        points: propagated,
        w_mean: points.w_mean.clone(),
        w_cov: points.w_cov.clone(),
    };
    Ok((GaussianBelief::new(mean, cov)?, set))
}

/// Kalman correction from the propagated points.
pub fn ut_update(
    prior: &GaussianBelief,
    propagated: &SigmaPointSet,
    obs: &ObservationSpec,
    y: &[f64],
) -> Result<GaussianBelief> {
    let l = prior.dim();
    obs.validate(l)?;
    let no = obs.output_dim(l);
    if y.len() != no {
        return Err(Error::DimensionMismatch(format!(
            "measurement of length {} for an observation of {no} components",
            y.len()
        )));
    }
    let ys: Vec<Vec<f64>> = propagated
        .points
        .iter()
        .map(|p| obs.apply(p))
        .collect::<Result<_>>()?;
    let y_mean = weighted_mean(&ys, &propagated.w_mean);
    let mut pyy = weighted_cross(&ys, &y_mean, &ys, &y_mean, &propagated.w_cov);
    pyy.add_scaled_in_place(1.0, &obs.noise_cov)?;
    let pyy = symmetrize(&pyy)?;
    let pxy = weighted_cross(&propagated.points, &prior.mean, &ys, &y_mean, &propagated.w_cov);
    // K = Pxy Pyy⁻¹, solved row by row as Pyy kᵢ = (Pxy)ᵢ.
    let mut k = Matrix::zeros(l, no);
    for i in 0..l {
        let row = solve_spd(&pyy, pxy.row(i))?;
        k.row_mut(i).copy_from_slice(&row);
    }
    let innovation: Vec<f64> = y.iter().zip(&y_mean).map(|(a, b)| a - b).collect();
    let correction = mat_vec(&k, &innovation)?;
    let mean: Vec<f64> = prior.mean.iter().zip(&correction).map(|(a, b)| a + b).collect();
    let kpk = mat_mat(&mat_mat(&k, &pyy)?, &k.transpose())?;
    let cov = symmetrize(&prior.cov.sub(&kpk)?)?;
    if cholesky_lower(&cov).is_ok() {
        return GaussianBelief::new(mean, cov);
    }
    let jittered = cov.add(&Matrix::identity(l).scale(1e-12))?;
    match cholesky_lower(&jittered) {
        Ok(_) => GaussianBelief::new(mean, jittered),
        Err(_) => Err(Error::CovarianceCollapse),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UkfConfig {
    pub ut: UtConfig,
    pub process_noise: Matrix,
    pub obs: ObservationSpec,
    pub update_every: usize,
}

impl UkfConfig {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        self.ut.validate()?;
        self.obs.validate(state_dim)?;
        if self.update_every == 0 {
            return Err(Error::ConfigInvalid("update_every must be at least 1".into()));
        }
        let q = &self.process_noise;
        if q.rows() != state_dim || q.cols() != state_dim || !is_symmetric(q, 1e-10) {
            return Err(Error::ConfigInvalid(
                "process noise must be a symmetric state-sized matrix".into(),
            ));
        }
        if q.data().iter().any(|v| *v != 0.0) {
            // positive semi-definite: Cholesky of Q + εI must succeed
            let scale = q.diag().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            cholesky_lower(&q.add(&Matrix::identity(state_dim).scale(1e-12 * scale))?)
                .map_err(|_| Error::ConfigInvalid("process noise is not PSD".into()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub step: usize,
    pub y: Vec<f64>,
}

/// Noisy observations of `truth[k]` at every `update_every`-th step (k ≥ 1).
pub fn simulate_measurements<R: Rng + ?Sized>(
    truth: &[Vec<f64>],
    obs: &ObservationSpec,
    update_every: usize,
    rng: &mut R,
) -> Result<Vec<Measurement>> {
    if update_every == 0 {
        return Err(Error::InvalidArgument("update_every must be at least 1".into()));
    }
    (1..truth.len())
        .filter(|k| k % update_every == 0)
        .map(|step| {
            Ok(Measurement {
                step,
                y: obs.observe(&truth[step], rng)?,
            })
        })
        .collect()
}

/// Filter output: one belief per step, starting with the initial one.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub beliefs: Vec<GaussianBelief>,
    pub updated: Vec<bool>,
}

impl FilterRun {
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.beliefs.iter().map(|b| b.mean.clone()).collect()
    }
}

/// Predict at every step and correct wherever a measurement exists.
pub fn run_filter<P: Predictor + ?Sized>(
    predictor: &P,
    config: &UkfConfig,
    belief0: &GaussianBelief,
    measurements: &[Measurement],
    n_steps: usize,
) -> Result<FilterRun> {
    config.validate(belief0.dim())?;
    let mut by_step: Vec<Option<&[f64]>> = vec![None; n_steps + 1];
    for m in measurements {
        if m.step == 0 || m.step > n_steps {
            return Err(Error::InvalidArgument(format!(
                "measurement at step {} is outside 1..={n_steps}",
                m.step
            )));
        }
        by_step[m.step] = Some(&m.y);
    }
    let mut beliefs = Vec::with_capacity(n_steps + 1);
    let mut updated = Vec::with_capacity(n_steps + 1);
    beliefs.push(belief0.clone());
    updated.push(false);
    let mut belief = belief0.clone();
    let noisy = config.process_noise.data().iter().any(|v| *v != 0.0);
    for (k, meas) in by_step.iter().enumerate().skip(1) {
        let step = || -> Result<(GaussianBelief, bool)> {
            let sp = make_sigma_points(&belief, &config.ut)?;
            let (prior, prop) = ut_predict(&sp, predictor, &config.process_noise)?;
            match meas {
                // With additive process noise the propagated points miss Σ_ω,
                // so the update draws fresh points from the prior.
                Some(y) if noisy => {
                    let fresh = make_sigma_points(&prior, &config.ut)?;
                    Ok((ut_update(&prior, &fresh, &config.obs, y)?, true))
                }
                Some(y) => Ok((ut_update(&prior, &prop, &config.obs, y)?, true)),
                None => Ok((prior, false)),
            }
        };
        let (next, up) = step().map_err(|e| e.at_step(k))?;
        belief = next;
        beliefs.push(belief.clone());
        updated.push(up);
    }
    Ok(FilterRun { beliefs, updated })
}

/// `t, m1..mL, var1..varL, two_sigma1..two_sigmaL, updated`.
pub fn beliefs_to_csv(times: &[f64], run: &FilterRun) -> Result<Vec<u8>> {
    let l = run.beliefs.first().map_or(0, |b| b.dim());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=l).map(|i| format!("m{i}")));
    header.extend((1..=l).map(|i| format!("var{i}")));
    header.extend((1..=l).map(|i| format!("two_sigma{i}")));
    header.push("updated".into());
    w.write_record(&header)?;
    for ((t, b), up) in times.iter().zip(&run.beliefs).zip(&run.updated) {
        let var = b.cov.diag();
        let mut rec = vec![t.to_string()];
        rec.extend(b.mean.iter().map(|v| v.to_string()));
        rec.extend(var.iter().map(|v| v.to_string()));
        rec.extend(var.iter().map(|v| (2.0 * v.sqrt()).to_string()));
        rec.push(u8::from(*up).to_string());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

/// Candidate values for the unscented parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub kappa: Vec<f64>,
}

/// Exhaustive search returning the configuration with the lowest finite
/// score. Candidates whose score fails are skipped.
pub fn grid_search<F>(grid: &UtGrid, mut score: F) -> Result<(UtConfig, f64)>
where
    F: FnMut(&UtConfig) -> Result<f64>,
{
    let mut best: Option<(UtConfig, f64)> = None;
    for &alpha in &grid.alpha {
        for &beta in &grid.beta {
            for &kappa in &grid.kappa {
                let ut = UtConfig { alpha, beta, kappa };
                match score(&ut) {
                    Ok(s) if s.is_finite() => {
                        if best.as_ref().is_none_or(|(_, b)| s < *b) {
                            best = Some((ut, s));
                        }
                    }
                    Ok(_) => log::debug!("{ut:?}: non-finite score"),
                    Err(e) => log::debug!("{ut:?}: {e}"),
                }
            }
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no grid candidate produced a finite score".into()))
}

/// `x ↦ A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    pub a: Matrix,
    pub dt: f64,
}

impl Predictor for LinearPredictor {
    fn state_dim(&self) -> usize {
        self.a.rows()
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step_batch(&self, xs: &Matrix) -> Result<Matrix> {
        mat_mat(xs, &self.a.transpose())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::ObservationKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Identity(usize);

    impl Predictor for Identity {
        fn state_dim(&self) -> usize {
            self.0
        }
        fn dt(&self) -> f64 {
            1.0
        }
        fn step_batch(&self, xs: &Matrix) -> Result<Matrix> {
            Ok(xs.clone())
        }
    }

    fn belief2() -> GaussianBelief {
        GaussianBelief::new(vec![0.5, -1.0], Matrix::from_rows(&[&[2.0, 0.3], &[0.3, 1.0]])).unwrap()
    }

    #[test]
    fn weight_examples() {
        let ut = UtConfig {
            alpha: 1.0,
            beta: 2.0,
            kappa: 1.0,
        };
        assert_eq!(ut.lambda(2), 1.0);
        let sp = make_sigma_points(&belief2(), &ut).unwrap();
        assert!((sp.w_mean[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((sp.w_cov[0] - 7.0 / 3.0).abs() < 1e-15);
        for i in 1..5 {
            assert!((sp.w_mean[i] - 1.0 / 6.0).abs() < 1e-15);
            assert_eq!(sp.w_mean[i], sp.w_cov[i]);
        }
        assert_eq!(sp.points[0], belief2().mean);
    }

    #[test]
    fn identity_covariance_offsets() {
        let b = GaussianBelief::new(vec![0.0, 0.0], Matrix::identity(2)).unwrap();
        let ut = UtConfig {
            alpha: 1.0,
            beta: 2.0,
            kappa: 1.0,
        };
        let sp = make_sigma_points(&b, &ut).unwrap();
        let r3 = 3f64.sqrt();
        assert_eq!(sp.points[1], vec![r3, 0.0]);
        assert_eq!(sp.points[2], vec![0.0, r3]);
        assert_eq!(sp.points[3], vec![-r3, 0.0]);
        assert_eq!(sp.points[4], vec![0.0, -r3]);
    }

    #[test]
    fn weights_normalize_and_mean_is_recovered() {
        for ut in [UtConfig::default(), UtConfig { alpha: 0.5, beta: 2.0, kappa: 3.0 }] {
            let sp = make_sigma_points(&belief2(), &ut).unwrap();
            let sm: f64 = sp.w_mean.iter().sum();
            let sc: f64 = sp.w_cov.iter().sum();
            assert!((sm - 1.0).abs() < 1e-9 * sp.w_mean[0].abs().max(1.0));
            assert!((sc - (2.0 - ut.alpha * ut.alpha + ut.beta)).abs() < 1e-9 * sp.w_cov[0].abs().max(1.0));
            // weights of order 1/α² amplify the rounding of the offsets
            let tol = 1e-15 * sp.w_mean[1].max(1.0);
            let m = sp.mean();
            assert!((m[0] - 0.5).abs() < tol && (m[1] + 1.0).abs() < tol, "{m:?}");
        }
    }

    #[test]
    fn negative_scaled_covariance() {
        let ut = UtConfig {
            alpha: 1.0,
            beta: 2.0,
            kappa: -3.0,
        };
        assert!(matches!(
            make_sigma_points(&belief2(), &ut),
            Err(Error::NegativeScaledCov(_))
        ));
    }

    #[test]
    fn identity_predict_is_idempotent() {
        let b = belief2();
        let unit = UtConfig { alpha: 1.0, beta: 2.0, kappa: 1.0 };
        let sp = make_sigma_points(&b, &unit).unwrap();
        let (p, _) = ut_predict(&sp, &Identity(2), &Matrix::zeros(2, 2)).unwrap();
        assert!((p.mean[0] - b.mean[0]).abs() < 1e-15 && (p.mean[1] - b.mean[1]).abs() < 1e-15);
        assert!(p.cov.max_abs_diff(&b.cov) < 1e-12);
        let sp = make_sigma_points(&b, &UtConfig::default()).unwrap();
        let (p, _) = ut_predict(&sp, &Identity(2), &Matrix::zeros(2, 2)).unwrap();
        assert!((p.mean[1] - b.mean[1]).abs() < 1e-9);
        assert!(p.cov.max_abs_diff(&b.cov) < 1e-12);
        let q = Matrix::identity(2).scale(0.04);
        let (pq, _) = ut_predict(&sp, &Identity(2), &q).unwrap();
        assert!(pq.cov.sub(&p.cov).unwrap().max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn linear_predict_is_exact() {
        let a = Matrix::from_rows(&[&[1.0, 0.1], &[-0.3, 0.9]]);
        let lin = LinearPredictor { a: a.clone(), dt: 1.0 };
        let b = belief2();
        let q = Matrix::from_diag(&[1e-3, 2e-3]);
        for ut in [UtConfig::default(), UtConfig { alpha: 1.0, beta: 0.0, kappa: 1.0 }] {
            let sp = make_sigma_points(&b, &ut).unwrap();
            let (p, _) = ut_predict(&sp, &lin, &q).unwrap();
            let m = mat_vec(&a, &b.mean).unwrap();
            let c = mat_mat(&mat_mat(&a, &b.cov).unwrap(), &a.transpose()).unwrap().add(&q).unwrap();
            assert!((p.mean[0] - m[0]).abs() < 1e-10 && (p.mean[1] - m[1]).abs() < 1e-10);
            assert!(p.cov.max_abs_diff(&c) < 1e-10 * c.frobenius_norm());
        }
    }

    #[test]
    fn update_with_expected_measurement_shrinks() {
        let b = belief2();
        let sp = make_sigma_points(&b, &UtConfig::default()).unwrap();
        let (prior, prop) = ut_predict(&sp, &Identity(2), &Matrix::zeros(2, 2)).unwrap();
        let obs = ObservationSpec::position_only(1, 0.1);
        let y = obs.apply(&prior.mean).unwrap();
        let post = ut_update(&prior, &prop, &obs, &y).unwrap();
        assert!((post.mean[0] - prior.mean[0]).abs() < 1e-9);
        assert!((post.mean[1] - prior.mean[1]).abs() < 1e-9);
        let diff = prior.cov.sub(&post.cov).unwrap();
        assert!(cholesky_lower(&diff.add(&Matrix::identity(2).scale(1e-12)).unwrap()).is_ok());
    }

    #[test]
    fn linear_update_matches_kalman() {
        let b = belief2();
        let h = Matrix::from_rows(&[&[1.0, 0.5]]);
        let r = Matrix::from_rows(&[&[0.2]]);
        let obs = ObservationSpec::new(ObservationKind::Linear(h.clone()), r.clone());
        let sp = make_sigma_points(&b, &UtConfig::default()).unwrap();
        let (prior, prop) = ut_predict(&sp, &Identity(2), &Matrix::zeros(2, 2)).unwrap();
        let y = [0.9];
        let post = ut_update(&prior, &prop, &obs, &y).unwrap();
        // closed form
        let p = &b.cov;
        let ph = mat_mat(p, &h.transpose()).unwrap();
        let s = mat_mat(&h, &ph).unwrap().add(&r).unwrap()[(0, 0)];
        let k = [ph[(0, 0)] / s, ph[(1, 0)] / s];
        let innov = y[0] - (b.mean[0] + 0.5 * b.mean[1]);
        let mean = [b.mean[0] + k[0] * innov, b.mean[1] + k[1] * innov];
        let mut cov = p.clone();
        for i in 0..2 {
            for j in 0..2 {
                cov.data_mut()[i * 2 + j] -= k[i] * s * k[j];
            }
        }
        assert!((post.mean[0] - mean[0]).abs() < 1e-9 && (post.mean[1] - mean[1]).abs() < 1e-9);
        assert!(post.cov.max_abs_diff(&cov) < 1e-9);
    }

    #[test]
    fn filter_step_with_process_noise_matches_kalman() {
        let b = belief2();
        let q = Matrix::from_diag(&[0.4, 0.1]);
        let h = Matrix::from_rows(&[&[1.0, 0.0]]);
        let r = Matrix::from_rows(&[&[0.3]]);
        let cfg = UkfConfig {
            ut: UtConfig::default(),
            process_noise: q.clone(),
            obs: ObservationSpec::new(ObservationKind::Linear(h), r),
            update_every: 1,
        };
        let meas = [Measurement { step: 1, y: vec![1.2] }];
        let run = run_filter(&Identity(2), &cfg, &b, &meas, 1).unwrap();
        let post = &run.beliefs[1];
        let p = b.cov.add(&q).unwrap();
        let s = p[(0, 0)] + 0.3;
        let k = [p[(0, 0)] / s, p[(1, 0)] / s];
        let innov = 1.2 - b.mean[0];
        for i in 0..2 {
            assert!((post.mean[i] - (b.mean[i] + k[i] * innov)).abs() < 1e-9);
            for j in 0..2 {
                assert!((post.cov[(i, j)] - (p[(i, j)] - k[i] * s * k[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn huge_measurement_noise_keeps_prior() {
        let b = belief2();
        let obs = ObservationSpec::position_only(1, 1e6);
        let sp = make_sigma_points(&b, &UtConfig::default()).unwrap();
        let (prior, prop) = ut_predict(&sp, &Identity(2), &Matrix::zeros(2, 2)).unwrap();
        let post = ut_update(&prior, &prop, &obs, &[40.0]).unwrap();
        for i in 0..2 {
            assert!((post.mean[i] - prior.mean[i]).abs() <= 1e-6 * prior.mean[i].abs().max(1.0));
        }
        assert!(post.cov.max_abs_diff(&prior.cov) <= 1e-6 * prior.cov.frobenius_norm());
    }

    #[test]
    fn exact_full_observation_collapses_to_truth() {
        let lin = LinearPredictor {
            a: Matrix::from_rows(&[&[1.0, 0.01], &[-0.05, 1.0]]),
            dt: 0.01,
        };
        let truth0 = [0.3, -0.2];
        let b0 = GaussianBelief::new(vec![0.5, 0.1], Matrix::identity(2).scale(0.1)).unwrap();
        let truth1 = lin.step(&truth0).unwrap();
        let cfg = UkfConfig {
            ut: UtConfig::default(),
            process_noise: Matrix::zeros(2, 2),
            obs: ObservationSpec::full_state(2, 0.0),
            update_every: 1,
        };
        let run = run_filter(&lin, &cfg, &b0, &[Measurement { step: 1, y: truth1.clone() }], 1).unwrap();
        let m = &run.beliefs[1].mean;
        assert!((m[0] - truth1[0]).abs() < 1e-8 && (m[1] - truth1[1]).abs() < 1e-8);
        assert_eq!(run.updated, vec![false, true]);
    }

    #[test]
    fn open_loop_filter_follows_rollout() {
        let lin = LinearPredictor {
            a: Matrix::from_rows(&[&[0.99, 0.05], &[-0.1, 0.98]]),
            dt: 0.1,
        };
        let b0 = GaussianBelief::new(vec![1.0, 0.0], Matrix::identity(2).scale(1e-12)).unwrap();
        let cfg = UkfConfig {
            ut: UtConfig::default(),
            process_noise: Matrix::zeros(2, 2),
            obs: ObservationSpec::position_only(1, 0.1),
            update_every: 10,
        };
        let run = run_filter(&lin, &cfg, &b0, &[], 50).unwrap();
        let roll = crate::models::rollout(&lin, &[1.0, 0.0], 50).unwrap();
        for (a, b) in run.means().iter().zip(&roll.states) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn posterior_below_prior_along_measured_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = Matrix::from_vec(2, 2, a).unwrap();
            let cov = mat_mat(&m, &m.transpose()).unwrap().add(&Matrix::identity(2).scale(0.1)).unwrap();
            let b = GaussianBelief::new(vec![0.0, 0.0], symmetrize(&cov).unwrap()).unwrap();
            let h = Matrix::from_rows(&[&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]]);
            let obs = ObservationSpec::new(ObservationKind::Linear(h.clone()), Matrix::from_rows(&[&[0.05]]));
            let sp = make_sigma_points(&b, &UtConfig::default()).unwrap();
            let (prior, prop) = ut_predict(&sp, &Identity(2), &Matrix::zeros(2, 2)).unwrap();
            let post = ut_update(&prior, &prop, &obs, &[0.3]).unwrap();
            let x = h.row(0);
            let quad = |c: &Matrix| crate::linalg::dot(x, &mat_vec(c, x).unwrap());
            assert!(quad(&post.cov) <= quad(&prior.cov) + 1e-12);
        }
    }

    #[test]
    fn belief_csv_layout() {
        let run = FilterRun {
            beliefs: vec![belief2()],
            updated: vec![true],
        };
        let text = String::from_utf8(beliefs_to_csv(&[0.0], &run).unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,m1,m2,var1,var2,two_sigma1,two_sigma2,updated");
        assert!(text.lines().nth(1).unwrap().ends_with(",1"));
    }

    #[test]
    fn grid_search_picks_minimum() {
        let grid = UtGrid {
            alpha: vec![1e-3, 0.1, 1.0],
            beta: vec![0.0, 2.0],
            kappa: vec![0.0],
        };
        let (best, score) = grid_search(&grid, |ut| {
            if ut.alpha == 1.0 {
                Err(Error::CovarianceCollapse)
            } else {
                Ok((ut.alpha - 0.1).abs() + (ut.beta - 2.0).abs())
            }
        })
        .unwrap();
        assert_eq!((best.alpha, best.beta, score), (0.1, 2.0, 0.0));
    }
}
