//! Coarse linear reachability used by the viewpoint layer.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::agent::{ControlBounds, UnicycleState};
use crate::error::{check_dim, Error, Result};
use crate::linalg::wrap_angle;

/// Fraction of the nominal reach the coarse model promises.
pub const REACH_SLACK: f64 = 0.9;

/// `x_T = F_x x_0 + B u` with `u` in an axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseModel {
    pub f_x: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    pub reach_radius: f64,
}

impl CoarseModel {
    pub fn new(
        f_x: DMatrix<f64>,
        b: DMatrix<f64>,
        u_lo: DVector<f64>,
        u_hi: DVector<f64>,
        reach_radius: f64,
    ) -> Result<Self> {
        let n = b.nrows();
        check_dim(n, f_x.nrows())?;
        check_dim(n, f_x.ncols())?;
        check_dim(n, b.ncols())?;
        check_dim(n, u_lo.len())?;
        check_dim(n, u_hi.len())?;
        if !(reach_radius > 0.0) {
            return Err(Error::InvalidArgument("reach radius must be positive".into()));
        }
        let b_inv = b
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("B must be invertible".into()))?;
        // The image of the box contains the ball iff every support value of
        // the ball along a row of B^-1 stays inside the box.
        for i in 0..n {
            let s = reach_radius * b_inv.row(i).norm();
            if s > u_hi[i] + 1e-12 || -s < u_lo[i] - 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "reachable set does not contain the ball of radius {reach_radius}"
                )));
            }
        }
        Ok(Self { f_x, b, u_lo, u_hi, reach_radius })
    }

    /// Planar displacement model of a unicycle over a horizon.
    pub fn for_unicycle(bounds: &ControlBounds, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        let u = REACH_SLACK * bounds.v_max;
        Self::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * horizon,
            DVector::from_element(2, -u),
            DVector::from_element(2, u),
            u * horizon,
        )
    }

    pub fn reaches(&self, from: &Vector2<f64>, to: &Vector2<f64>) -> bool {
        (to - from).norm() <= self.reach_radius
    }
}

/// Heading-aware reachable region: points a unicycle can reach by turning
/// in place at full rate and then driving straight, with the same slack as
/// the coarse model. Star-shaped about the robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachRegion {
    pub origin: Vector2<f64>,
    pub heading: f64,
    pub v_max: f64,
    pub omega_max: f64,
    pub horizon: f64,
}

impl ReachRegion {
    pub fn new(pose: &UnicycleState, bounds: &ControlBounds, horizon: f64) -> Self {
        Self {
            origin: pose.position(),
            heading: pose.theta,
            v_max: bounds.v_max,
            omega_max: bounds.omega_max,
            horizon,
        }
    }

    pub fn radius_toward(&self, bearing: f64) -> f64 {
        let turn = wrap_angle(bearing - self.heading).abs() / self.omega_max;
        REACH_SLACK * self.v_max * (self.horizon - turn).max(0.0)
    }

    pub fn max_radius(&self) -> f64 {
        REACH_SLACK * self.v_max * self.horizon
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let d = p - self.origin;
        let r = d.norm();
        r <= 1e-12 || r <= self.radius_toward(d.y.atan2(d.x)) + 1e-12
    }

    /// Radial retraction toward the robot.
    pub fn retract(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let d = p - self.origin;
        let r = d.norm();
        if r <= 1e-12 {
            return *p;
        }
        let lim = self.radius_toward(d.y.atan2(d.x));
        if r <= lim {
            *p
        } else {
            self.origin + d * (lim / r)
        }
    }
}
