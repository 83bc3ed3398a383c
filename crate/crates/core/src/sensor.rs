//! Quasi-concave Gaussian-mixture detection model.
//!
//! The probability that a robot at `x` detects an object at `a` is
//! `sum_l zeta_l * exp(-0.5 (a - (x - c_l))' S_l^-1 (a - (x - c_l)))`,
//! with the mixture scaled so its maximum over object positions is one.
//! Against Gaussian robot and object beliefs each mixand integrates in
//! closed form to a Gaussian in the robot mean.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussmix::{Gaussian, GaussianMixture, WeightedGaussian};
use crate::linalg::{self, mat_from_rows, mat_to_rows, spd_inverse_det};

const PEAK_TOL: f64 = 1e-3;

/// One weighted Gaussian term of the detection kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorMixand {
    pub zeta: f64,
    pub offset: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl SensorMixand {
    pub fn new(zeta: f64, offset: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !(zeta > 0.0) || !zeta.is_finite() {
            return Err(Error::InvalidArgument(format!("mixand weight {zeta} must be positive")));
        }
        check_dim(offset.len(), cov.nrows())?;
        check_dim(offset.len(), cov.ncols())?;
        if !linalg::is_symmetric(&cov, 1e-10) || cov.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("mixand covariance must be SPD".into()));
        }
        Ok(Self { zeta, offset, cov })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SensorRepr", into = "SensorRepr")]
pub struct SensorModel {
    mixands: Vec<SensorMixand>,
}

impl SensorModel {
    /// Builds a sensor and checks the kernel peaks at one.
    pub fn new(mixands: Vec<SensorMixand>) -> Result<Self> {
        let model = Self::unchecked(mixands)?;
        let peak = model.peak();
        if (peak - 1.0).abs() > PEAK_TOL {
            return Err(Error::InvalidArgument(format!(
                "detection kernel peaks at {peak:.6}, expected 1"
            )));
        }
        Ok(model)
    }

    /// Builds a sensor after rescaling every `zeta` so the kernel peaks at one.
    pub fn normalized(mixands: Vec<SensorMixand>) -> Result<Self> {
        let model = Self::unchecked(mixands)?;
        let peak = model.peak();
        let mixands = model
            .mixands
            .into_iter()
            .map(|m| SensorMixand { zeta: m.zeta / peak, ..m })
            .collect();
        Self::new(mixands)
    }

    fn unchecked(mixands: Vec<SensorMixand>) -> Result<Self> {
        let first = mixands
            .first()
            .ok_or_else(|| Error::InvalidArgument("sensor needs at least one mixand".into()))?;
        let n = first.offset.len();
        for m in &mixands {
            check_dim(n, m.offset.len())?;
        }
        Ok(Self { mixands })
    }

    /// Single centred isotropic mixand with standard deviation `sigma`.
    pub fn isotropic(sigma: f64, dim: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument("sensor sigma must be positive".into()));
        }
        Self::new(vec![SensorMixand::new(
            1.0,
            DVector::zeros(dim),
            DMatrix::identity(dim, dim) * (sigma * sigma),
        )?])
    }

    pub fn mixands(&self) -> &[SensorMixand] {
        &self.mixands
    }

    pub fn n_mixands(&self) -> usize {
        self.mixands.len()
    }

    pub fn dim(&self) -> usize {
        self.mixands[0].offset.len()
    }

    /// Kernel value as a function of the displacement `a - x`.
    fn kernel_displacement(&self, d: &DVector<f64>) -> f64 {
        self.mixands
            .iter()
            .map(|m| {
                let e = d + &m.offset;
                let q = m.cov.clone().cholesky().map_or(f64::INFINITY, |c| {
                    let y = c.l().solve_lower_triangular(&e).unwrap_or_else(|| e.clone());
                    y.norm_squared()
                });
                m.zeta * (-0.5 * q).exp()
            })
            .sum()
    }

    /// Un-clamped kernel value for a robot at `robot` and object at `object`.
    pub fn kernel_raw(&self, robot: &DVector<f64>, object: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), robot.len())?;
        check_dim(self.dim(), object.len())?;
        Ok(self.kernel_displacement(&(object - robot)))
    }

    /// Detection probability for known robot and object positions.
    pub fn kernel(&self, robot: &DVector<f64>, object: &DVector<f64>) -> Result<f64> {
        Ok(self.kernel_raw(robot, object)?.clamp(0.0, 1.0))
    }

    /// Maximum of the kernel over object positions, located by fixed-point
    /// mode search started at every mixand centre.
    pub fn peak(&self) -> f64 {
        let precs: Vec<DMatrix<f64>> = self
            .mixands
            .iter()
            .map(|m| m.cov.clone().try_inverse().unwrap_or_else(|| m.cov.clone()))
            .collect();
        let mut best: f64 = 0.0;
        for start in &self.mixands {
            let mut d = -&start.offset;
            for _ in 0..500 {
                let n = d.len();
                let mut a = DMatrix::zeros(n, n);
                let mut b = DVector::zeros(n);
                for (m, p) in self.mixands.iter().zip(&precs) {
                    let e = &d + &m.offset;
                    let w = m.zeta * (-0.5 * (e.transpose() * p * &e)[(0, 0)]).exp();
                    a += p * w;
                    b -= p * &m.offset * w;
                }
                let Some(next) = a.lu().solve(&b) else { break };
                let step = (&next - &d).norm();
                d = next;
                if step < 1e-12 {
                    break;
                }
            }
            best = best.max(self.kernel_displacement(&d));
        }
        best
    }

    fn terms(
        &self,
        robot_mean: &DVector<f64>,
        robot_cov: &DMatrix<f64>,
        obj: &Gaussian,
    ) -> Result<f64> {
        let n = self.dim();
        check_dim(n, robot_mean.len())?;
        check_dim(n, robot_cov.nrows())?;
        check_dim(n, obj.dim())?;
        let mut total = 0.0;
        for m in &self.mixands {
            let s = &m.cov + robot_cov + obj.cov();
            let (inv, det) = spd_inverse_det(&s)
                .map_err(|_| Error::Numerical("singular total covariance".into()))?;
            let det_o = m.cov.determinant();
            let delta = robot_mean - &m.offset - obj.mean();
            total += m.zeta * (det_o / det).sqrt() * (-0.5 * linalg::quad_form(&inv, &delta)).exp();
        }
        Ok(total)
    }

    /// Detection probability of a Gaussian object belief by a robot with
    /// Gaussian pose belief.
    pub fn detect_prob_gaussian(
        &self,
        robot_mean: &DVector<f64>,
        robot_cov: &DMatrix<f64>,
        obj: &Gaussian,
    ) -> Result<f64> {
        Ok(self.terms(robot_mean, robot_cov, obj)?.clamp(0.0, 1.0))
    }

    /// Detection probability of an object whose position belief is a
    /// mixture; the mixture is normalized internally.
    pub fn detect_prob_mixture(
        &self,
        robot_mean: &DVector<f64>,
        robot_cov: &DMatrix<f64>,
        obj: &GaussianMixture,
    ) -> Result<f64> {
        let mass = obj.mass();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::InvalidBelief(format!("object belief has mass {mass}")));
        }
        let mut total = 0.0;
        for c in obj.components() {
            total += c.mass() / mass * self.terms(robot_mean, robot_cov, &c.gaussian)?;
        }
        Ok(total.clamp(0.0, 1.0))
    }

    /// Detection probability as a function of object position, with the
    /// robot pose marginalized out.
    pub fn miss_kernel_in_object_space(
        &self,
        robot_mean: &DVector<f64>,
        robot_cov: &DMatrix<f64>,
    ) -> Result<GaussianMixture> {
        check_dim(self.dim(), robot_mean.len())?;
        check_dim(self.dim(), robot_cov.nrows())?;
        let comps = self
            .mixands
            .iter()
            .map(|m| {
                let cov = &m.cov + robot_cov;
                let scale = (m.cov.determinant() / cov.determinant()).sqrt();
                Ok(WeightedGaussian::new(
                    m.zeta * scale,
                    Gaussian::new(robot_mean - &m.offset, cov)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(comps)
    }

    /// Bernoulli detection draw for true robot and object positions.
    pub fn sample_detection<R: Rng + ?Sized>(
        &self,
        robot_true: &DVector<f64>,
        object_true: &DVector<f64>,
        rng: &mut R,
    ) -> Result<bool> {
        let p = self.kernel(robot_true, object_true)?;
        Ok(rng.random::<f64>() < p)
    }
}

/// Gaussian-mixture approximation of a perfect range detector.
#[derive(Debug, Clone)]
pub struct RangeDetector {
    pub sensor: SensorModel,
    /// Integrated absolute error against the disc indicator.
    pub l1_error: f64,
    pub disc_area: f64,
}

impl RangeDetector {
    pub fn relative_error(&self) -> f64 {
        self.l1_error / self.disc_area
    }
}

/// Approximates the indicator of a disc of radius `radius` by one central
/// mixand plus `n_ring` mixands on a ring, and reports the grid L1 error.
pub fn range_detector_approx(radius: f64, n_ring: usize) -> Result<RangeDetector> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument("detector radius must be positive".into()));
    }
    let sensor = if n_ring == 0 {
        // exp(-r^2 / 2 s^2) = 1/2 at the rim.
        let sigma = radius / (2.0 * std::f64::consts::LN_2).sqrt();
        SensorModel::isotropic(sigma, 2)?
    } else {
        // Shape ratios fitted offline for six ring mixands; the tangential
        // spread and weight scale with the ring density.
        let ring_scale = 6.0 / n_ring as f64;
        let sigma_c = 0.3989 * radius;
        let rho = 0.6936 * radius;
        let s_rad = 0.1969 * radius;
        let s_tan = 0.3663 * radius * ring_scale;
        let zeta_ring = 0.6848;
        let mut mixands = vec![SensorMixand::new(
            1.0,
            DVector::zeros(2),
            DMatrix::identity(2, 2) * sigma_c * sigma_c,
        )?];
        for i in 0..n_ring {
            let ang = 2.0 * std::f64::consts::PI * i as f64 / n_ring as f64;
            let (s, c) = ang.sin_cos();
            let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
            let diag = DMatrix::from_diagonal(&DVector::from_column_slice(&[
                s_rad * s_rad,
                s_tan * s_tan,
            ]));
            let cov = linalg::symmetrize(&(&rot * diag * rot.transpose()));
            // Object displacement a - x = -c_l, so the ring offset is negated.
            let offset = DVector::from_column_slice(&[-rho * c, -rho * s]);
            mixands.push(SensorMixand::new(zeta_ring, offset, cov)?);
        }
        SensorModel::normalized(mixands)?
    };
    let l1_error = disc_l1_error(&sensor, radius);
    Ok(RangeDetector {
        sensor,
        l1_error,
        disc_area: std::f64::consts::PI * radius * radius,
    })
}

/// Midpoint-rule L1 distance between the kernel and the disc indicator over
/// the square `[-2r, 2r]^2`.
pub fn disc_l1_error(sensor: &SensorModel, radius: f64) -> f64 {
    let n = 200;
    let h = 4.0 * radius / n as f64;
    let mut err = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = -2.0 * radius + (i as f64 + 0.5) * h;
            let y = -2.0 * radius + (j as f64 + 0.5) * h;
            let d = DVector::from_column_slice(&[x, y]);
            let k = sensor.kernel_displacement(&d).min(1.0);
            let ind = if x * x + y * y <= radius * radius { 1.0 } else { 0.0 };
            err += (k - ind).abs() * h * h;
        }
    }
    err
}

#[derive(Serialize, Deserialize)]
struct MixandRepr {
    zeta: f64,
    c: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SensorRepr {
    mixands: Vec<MixandRepr>,
}

impl TryFrom<SensorRepr> for SensorModel {
    type Error = Error;

    fn try_from(r: SensorRepr) -> Result<Self> {
        let mixands = r
            .mixands
            .into_iter()
            .map(|m| SensorMixand::new(m.zeta, DVector::from_vec(m.c), mat_from_rows(&m.cov)?))
            .collect::<Result<Vec<_>>>()?;
        SensorModel::new(mixands)
    }
}

impl From<SensorModel> for SensorRepr {
    fn from(s: SensorModel) -> Self {
        Self {
            mixands: s
                .mixands
                .iter()
                .map(|m| MixandRepr {
                    zeta: m.zeta,
                    c: m.offset.iter().cloned().collect(),
                    cov: mat_to_rows(&m.cov),
                })
                .collect(),
        }
    }
}
