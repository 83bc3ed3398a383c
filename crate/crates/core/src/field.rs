//! Planar detection-probability fields as sums of Gaussian bumps.
//!
//! Planners evaluate the expected detection probability, its gradient and
//! Hessian with respect to the robot position many times per solve, so the
//! closed-form mixand-by-component products are flattened here into
//! fixed-size bumps.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::gaussmix::{Gaussian, GaussianMixture};
use crate::linalg::{to_mat2, to_vec2};
use crate::sensor::SensorModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub weight: f64,
    pub center: Vector2<f64>,
    pub prec: Matrix2<f64>,
}

impl Bump {
    #[inline]
    pub fn value(&self, p: &Vector2<f64>) -> f64 {
        let d = p - self.center;
        self.weight * (-0.5 * d.dot(&(self.prec * d))).exp()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionField {
    bumps: Vec<Bump>,
}

impl DetectionField {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bumps(&self) -> &[Bump] {
        &self.bumps
    }

    pub fn is_empty(&self) -> bool {
        self.bumps.is_empty()
    }

    /// Detection field of a single Gaussian object belief, scaled by `weight`.
    pub fn from_gaussian(
        sensor: &SensorModel,
        robot_cov: &Matrix2<f64>,
        obj: &Gaussian,
        weight: f64,
    ) -> Result<Self> {
        let mut f = Self::new();
        f.add_gaussian(sensor, robot_cov, obj, weight)?;
        Ok(f)
    }

    /// Detection field of a mixture belief normalized to unit mass.
    pub fn from_belief(
        sensor: &SensorModel,
        robot_cov: &Matrix2<f64>,
        belief: &GaussianMixture,
    ) -> Result<Self> {
        let mut f = Self::new();
        let mass = belief.mass();
        if belief.is_empty() || !(mass > 0.0) {
            return Ok(f);
        }
        for c in belief.components() {
            f.add_gaussian(sensor, robot_cov, &c.gaussian, c.mass() / mass)?;
        }
        Ok(f)
    }

    pub fn add_gaussian(
        &mut self,
        sensor: &SensorModel,
        robot_cov: &Matrix2<f64>,
        obj: &Gaussian,
        weight: f64,
    ) -> Result<()> {
        if sensor.dim() != 2 || obj.dim() != 2 {
            return Err(Error::Dimension { expected: 2, got: obj.dim().max(sensor.dim()) });
        }
        let mean = to_vec2(obj.mean());
        let cov = to_mat2(obj.cov());
        for m in sensor.mixands() {
            let so = to_mat2(&m.cov);
            let s = so + robot_cov + cov;
            let prec = s
                .try_inverse()
                .ok_or_else(|| Error::Numerical("singular detection covariance".into()))?;
            let w = weight * m.zeta * (so.determinant() / s.determinant()).sqrt();
            if w > 0.0 {
                self.bumps.push(Bump { weight: w, center: mean + to_vec2(&m.offset), prec });
            }
        }
        Ok(())
    }

    pub fn extend(&mut self, other: &DetectionField) {
        self.bumps.extend_from_slice(&other.bumps);
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for b in &mut self.bumps {
            b.weight *= s;
        }
        self
    }

    /// Un-clamped field value.
    pub fn value(&self, p: &Vector2<f64>) -> f64 {
        self.bumps.iter().map(|b| b.value(p)).sum()
    }

    pub fn value_grad(&self, p: &Vector2<f64>) -> (f64, Vector2<f64>) {
        let mut v = 0.0;
        let mut g = Vector2::zeros();
        for b in &self.bumps {
            let d = p - b.center;
            let pd = b.prec * d;
            let e = b.weight * (-0.5 * d.dot(&pd)).exp();
            v += e;
            g -= pd * e;
        }
        (v, g)
    }

    pub fn value_grad_hess(&self, p: &Vector2<f64>) -> (f64, Vector2<f64>, Matrix2<f64>) {
        let mut v = 0.0;
        let mut g = Vector2::zeros();
        let mut h = Matrix2::zeros();
        for b in &self.bumps {
            let d = p - b.center;
            let pd = b.prec * d;
            let e = b.weight * (-0.5 * d.dot(&pd)).exp();
            v += e;
            g -= pd * e;
            h += (pd * pd.transpose() - b.prec) * e;
        }
        (v, g, h)
    }
}
