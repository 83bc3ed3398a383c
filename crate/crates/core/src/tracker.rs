//! Kalman tracking of discovered objects under LTI dynamics and the
//! intermittent-measurement covariance study.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussmix::Gaussian;
use crate::linalg::{self, clamp_eigenvalues, spectral_norm, symmetrize};

/// Discrete-time linear model `a' = F a + w`, `z = H a + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel {
    pub f: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Defaults for the planar constant-velocity object model.
pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_Q: f64 = 0.01;
pub const DEFAULT_R: f64 = 0.01;

impl LtiModel {
    pub fn new(f: DMatrix<f64>, q: DMatrix<f64>, h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = f.nrows();
        check_dim(n, f.ncols())?;
        check_dim(n, q.nrows())?;
        check_dim(n, q.ncols())?;
        check_dim(n, h.ncols())?;
        check_dim(h.nrows(), r.nrows())?;
        check_dim(h.nrows(), r.ncols())?;
        for (name, m) in [("Q", &q), ("R", &r)] {
            if !linalg::is_symmetric(m, 1e-10) || m.clone().cholesky().is_none() {
                return Err(Error::InvalidArgument(format!("{name} must be SPD")));
            }
        }
        let model = Self { f, q, h, r };
        if !model.is_observable() {
            return Err(Error::InvalidArgument("(F, H) is not observable".into()));
        }
        Ok(model)
    }

    /// Planar constant-velocity model with state `[x, y, vx, vy]`, white
    /// acceleration noise of intensity `q` and position measurements.
    pub fn constant_velocity(dt: f64, q: f64, r: f64) -> Result<Self> {
        if !(dt > 0.0 && q > 0.0 && r > 0.0) {
            return Err(Error::InvalidArgument("dt, q and r must be positive".into()));
        }
        let mut f = DMatrix::identity(4, 4);
        f[(0, 2)] = dt;
        f[(1, 3)] = dt;
        let (a, b, c) = (dt.powi(3) / 3.0, dt.powi(2) / 2.0, dt);
        let mut qm = DMatrix::zeros(4, 4);
        for i in 0..2 {
            qm[(i, i)] = a * q;
            qm[(i, i + 2)] = b * q;
            qm[(i + 2, i)] = b * q;
            qm[(i + 2, i + 2)] = c * q;
        }
        let mut h = DMatrix::zeros(2, 4);
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        Self::new(f, qm, h, DMatrix::identity(2, 2) * r)
    }

    pub fn default_planar() -> Self {
        Self::constant_velocity(DEFAULT_DT, DEFAULT_Q, DEFAULT_R).expect("default model is valid")
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn meas_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_observable(&self) -> bool {
        let n = self.state_dim();
        let m = self.meas_dim();
        let mut obs = DMatrix::zeros(n * m, n);
        let mut hf = self.h.clone();
        for k in 0..n {
            obs.rows_mut(k * m, m).copy_from(&hf);
            hf = &hf * &self.f;
        }
        let sv = obs.singular_values();
        let max = sv.max();
        max > 0.0 && sv.iter().filter(|&&s| s > 1e-9 * max).count() == n
    }

    /// `(F^k, sum_{i<k} F^i Q F^i')`.
    pub fn propagation(&self, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        let mut fk = DMatrix::identity(n, n);
        let mut qk = DMatrix::zeros(n, n);
        for _ in 0..k {
            qk = &self.f * qk * self.f.transpose() + &self.q;
            fk = &self.f * fk;
        }
        (fk, symmetrize(&qk))
    }

    /// The same model sampled every `k` steps.
    pub fn lifted(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("lift factor must be at least 1".into()));
        }
        let (f, q) = self.propagation(k);
        Self::new(f, q, self.h.clone(), self.r.clone())
    }
}

fn predict_cov(f: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(f * p * f.transpose() + q))
}

fn update_cov(model: &LtiModel, p: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let h = &model.h;
    let s = h * p * h.transpose() + &model.r;
    let s_inv = s
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
    let gain = p * h.transpose() * s_inv;
    let n = p.nrows();
    let ikh = DMatrix::identity(n, n) - &gain * h;
    let post = &ikh * p * ikh.transpose() + &gain * &model.r * gain.transpose();
    Ok((symmetrize(&post), gain))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanTrack {
    pub id: u64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub model: LtiModel,
    pub last_update: f64,
}

impl KalmanTrack {
    pub fn new(id: u64, mean: DVector<f64>, cov: DMatrix<f64>, model: LtiModel, time: f64) -> Result<Self> {
        let n = model.state_dim();
        check_dim(n, mean.len())?;
        check_dim(n, cov.nrows())?;
        check_dim(n, cov.ncols())?;
        if !linalg::is_symmetric(&cov, 1e-10) {
            return Err(Error::InvalidArgument("track covariance must be symmetric".into()));
        }
        Ok(Self { id, mean, cov: clamp_eigenvalues(&cov, 0.0), model, last_update: time })
    }

    /// Track born at a position measurement with zero velocity and a
    /// velocity variance of `v_max^2`.
    pub fn spawn(id: u64, z: &DVector<f64>, model: LtiModel, v_max: f64, time: f64) -> Result<Self> {
        let n = model.state_dim();
        let m = model.meas_dim();
        check_dim(m, z.len())?;
        let mut mean = DVector::zeros(n);
        mean.rows_mut(0, m).copy_from(z);
        let mut cov = DMatrix::identity(n, n) * (v_max * v_max);
        cov.view_mut((0, 0), (m, m)).copy_from(&model.r);
        Self::new(id, mean, cov, model, time)
    }

    pub fn predict(&self, steps: usize) -> KalmanTrack {
        if steps == 0 {
            return self.clone();
        }
        let (fk, qk) = self.model.propagation(steps);
        KalmanTrack {
            mean: &fk * &self.mean,
            cov: predict_cov(&fk, &qk, &self.cov),
            ..self.clone()
        }
    }

    pub fn update(&self, z: &DVector<f64>) -> Result<KalmanTrack> {
        check_dim(self.model.meas_dim(), z.len())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("measurement must be finite".into()));
        }
        let (cov, gain) = update_cov(&self.model, &self.cov)?;
        let innov = z - &self.model.h * &self.mean;
        Ok(KalmanTrack { mean: &self.mean + gain * innov, cov, ..self.clone() })
    }

    /// Measured-coordinate marginal `N(H a, H P H')`.
    pub fn position(&self) -> Gaussian {
        let h = &self.model.h;
        Gaussian::new(h * &self.mean, symmetrize(&(h * &self.cov * h.transpose())))
            .expect("marginal of a valid track is valid")
    }

    pub fn position_cov_norm(&self) -> f64 {
        spectral_norm(&(&self.model.h * &self.cov * self.model.h.transpose()))
    }

    pub fn cov_norm(&self) -> f64 {
        spectral_norm(&self.cov)
    }
}

const RICCATI_TOL: f64 = 1e-9;
const RICCATI_MAX_ITER: usize = 100_000;

/// Posterior covariance fixed point of the predict-update recursion.
pub fn riccati_fixed_point(model: &LtiModel) -> Result<DMatrix<f64>> {
    let mut p = model.q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..RICCATI_MAX_ITER {
        let (next, _) = update_cov(model, &predict_cov(&model.f, &model.q, &p))?;
        residual = (&next - &p).norm();
        p = next;
        if residual < RICCATI_TOL {
            return Ok(p);
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::Divergence { iterations: RICCATI_MAX_ITER, residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub horizons: usize,
    pub trials: usize,
    pub steps_per_horizon: usize,
    pub rng_seed: u64,
    /// Norm thresholds (m^2) at which the empirical CDF is reported.
    pub thresholds: Vec<f64>,
    pub bin_width: f64,
    /// Velocity spread of the initial track, as at track birth.
    pub initial_speed: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            horizons: 20,
            trials: 10_000,
            steps_per_horizon: 20,
            rng_seed: 0,
            thresholds: vec![0.05, 0.1, 0.2, 0.27, 0.5, 1.0],
            bin_width: 0.1,
            initial_speed: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceStudyReport {
    pub detect_prob: f64,
    #[serde(skip)]
    pub norms: Vec<f64>,
    pub pmf_peak_fraction: f64,
    pub mean_norm: f64,
    pub cdf_at: Vec<CdfPoint>,
}

impl CovarianceStudyReport {
    pub fn cdf(&self, threshold: f64) -> f64 {
        self.norms.iter().filter(|&&n| n <= threshold).count() as f64 / self.norms.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "trial,norm")?;
        for (i, n) in self.norms.iter().enumerate() {
            writeln!(w, "{i},{n:.12e}")?;
        }
        Ok(())
    }
}

/// Monte-Carlo distribution of the final covariance norm when each
/// horizon ends with a measurement with probability `detect_prob`.
///
/// Trial `i` always consumes the same uniform stream, so studies at
/// different probabilities with one seed are coupled trial by trial.
pub fn intermittent_covariance_study(
    model: &LtiModel,
    detect_prob: f64,
    cfg: &StudyConfig,
) -> Result<CovarianceStudyReport> {
    if !(detect_prob > 0.0 && detect_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!("detect_prob {detect_prob} not in (0, 1]")));
    }
    if cfg.trials == 0 || cfg.steps_per_horizon == 0 {
        return Err(Error::InvalidArgument("trials and steps_per_horizon must be positive".into()));
    }
    if !(cfg.bin_width > 0.0) {
        return Err(Error::InvalidArgument("bin_width must be positive".into()));
    }
    let lifted = model.lifted(cfg.steps_per_horizon)?;
    let init = KalmanTrack::spawn(
        0,
        &DVector::zeros(model.meas_dim()),
        model.clone(),
        cfg.initial_speed,
        0.0,
    )?
    .cov;
    let mut norms = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(trial as u64);
        let mut p = init.clone();
        for _ in 0..cfg.horizons {
            p = predict_cov(&lifted.f, &lifted.q, &p);
            if rng.random::<f64>() < detect_prob {
                p = update_cov(&lifted, &p)?.0;
            }
        }
        norms.push(spectral_norm(&p));
    }
    let mean_norm = norms.iter().sum::<f64>() / norms.len() as f64;
    let mut bins = std::collections::BTreeMap::<u64, usize>::new();
    for n in &norms {
        *bins.entry((n / cfg.bin_width).floor() as u64).or_default() += 1;
    }
    let peak = bins.values().copied().max().unwrap_or(0);
    let mut report = CovarianceStudyReport {
        detect_prob,
        norms,
        pmf_peak_fraction: peak as f64 / cfg.trials as f64,
        mean_norm,
        cdf_at: Vec::new(),
    };
    report.cdf_at = cfg
        .thresholds
        .iter()
        .map(|&t| CdfPoint { threshold: t, fraction: report.cdf(t) })
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(f: f64, q: f64, h: f64, r: f64) -> LtiModel {
        let m = |v| DMatrix::from_element(1, 1, v);
        LtiModel::new(m(f), m(q), m(h), m(r)).unwrap()
    }

    fn track(model: LtiModel) -> KalmanTrack {
        let n = model.state_dim();
        KalmanTrack::new(1, DVector::from_element(n, 1.0), DMatrix::identity(n, n) * 0.5, model, 0.0)
            .unwrap()
    }

    #[test]
    fn zero_step_prediction_is_identity() {
        let t = track(LtiModel::default_planar());
        assert_eq!(t.predict(0), t);
    }

    #[test]
    fn static_model_adds_noise_per_step() {
        let m = LtiModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.1,
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let t = track(m);
        let p = t.predict(5);
        assert!((&p.cov - (&t.cov + DMatrix::identity(2, 2) * 0.5)).norm() < 1e-14);
    }

    #[test]
    fn perfect_measurement_sets_mean() {
        let t = track(scalar(1.0, 1.0, 1.0, 1e-14));
        let u = t.update(&DVector::from_element(1, 3.0)).unwrap();
        assert!((u.mean[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn scalar_update_matches_hand_gain() {
        let t = track(scalar(1.0, 1.0, 2.0, 0.5));
        // k = p h / (h^2 p + r) = 0.5*2 / (2 + 0.5) = 0.4
        let u = t.update(&DVector::from_element(1, 4.0)).unwrap();
        assert!((u.mean[0] - (1.0 + 0.4 * (4.0 - 2.0))).abs() < 1e-12);
        assert!((u.cov[(0, 0)] - (1.0 - 0.4 * 2.0) * 0.5).abs() < 1e-12);
    }

    #[test]
    fn repeated_static_updates_shrink_covariance() {
        let m = LtiModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 1e-300,
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.1,
        )
        .unwrap();
        let mut t = track(m);
        for _ in 0..10_000 {
            t = t.update(&DVector::zeros(2)).unwrap();
        }
        assert!(t.cov_norm() < 1e-4);
    }

    #[test]
    fn scalar_riccati_is_golden_ratio_root() {
        let p = riccati_fixed_point(&scalar(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert!((p[(0, 0)] - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn forgetting_model_fixed_point_is_one_step() {
        let p = riccati_fixed_point(&scalar(0.0, 2.0, 1.0, 1.0)).unwrap();
        assert!((p[(0, 0)] - (2.0 - 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn unobservable_model_rejected() {
        let mut h = DMatrix::zeros(1, 2);
        h[(0, 1)] = 1.0;
        let r = LtiModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            h,
            DMatrix::identity(1, 1),
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn spawn_places_measurement_and_velocity_spread() {
        let t = KalmanTrack::spawn(7, &DVector::from_column_slice(&[1.0, 2.0]), LtiModel::default_planar(), 0.5, 1.0).unwrap();
        assert_eq!(t.mean.as_slice(), &[1.0, 2.0, 0.0, 0.0]);
        assert!((t.cov[(0, 0)] - DEFAULT_R).abs() < 1e-15);
        assert!((t.cov[(3, 3)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn study_rejects_bad_probability() {
        let m = LtiModel::default_planar();
        let cfg = StudyConfig { trials: 5, ..Default::default() };
        assert!(intermittent_covariance_study(&m, 0.0, &cfg).is_err());
        assert!(intermittent_covariance_study(&m, 1.1, &cfg).is_err());
    }
}
