//! Robot state, controls and unicycle kinematics.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnicycleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl UnicycleState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub v: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub v_max: f64,
    pub omega_max: f64,
}

impl ControlBounds {
    pub fn new(v_max: f64, omega_max: f64) -> Result<Self> {
        if !(v_max > 0.0 && omega_max > 0.0) || !v_max.is_finite() || !omega_max.is_finite() {
            return Err(Error::InvalidArgument("control bounds must be positive".into()));
        }
        Ok(Self { v_max, omega_max })
    }

    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            v: u.v.clamp(0.0, self.v_max),
            omega: u.omega.clamp(-self.omega_max, self.omega_max),
        }
    }

    pub fn contains(&self, u: &ControlInput) -> bool {
        u.v >= 0.0 && u.v <= self.v_max && u.omega.abs() <= self.omega_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: usize,
    pub pose: UnicycleState,
    /// Position covariance of the robot belief.
    pub pose_cov: Matrix2<f64>,
    pub bounds: ControlBounds,
}

impl AgentState {
    pub fn new(id: usize, pose: UnicycleState, bounds: ControlBounds) -> Self {
        Self { id, pose, pose_cov: Matrix2::zeros(), bounds }
    }

    pub fn position(&self) -> Vector2<f64> {
        self.pose.position()
    }
}

/// Exact unicycle motion under constant controls for `dt`.
pub fn unicycle_arc(s: &UnicycleState, u: &ControlInput, dt: f64) -> UnicycleState {
    let th1 = s.theta + u.omega * dt;
    if (u.omega * dt).abs() < 1e-9 {
        let mid = s.theta + 0.5 * u.omega * dt;
        return UnicycleState::new(s.x + u.v * dt * mid.cos(), s.y + u.v * dt * mid.sin(), th1);
    }
    let r = u.v / u.omega;
    UnicycleState::new(
        s.x + r * (th1.sin() - s.theta.sin()),
        s.y - r * (th1.cos() - s.theta.cos()),
        th1,
    )
}
