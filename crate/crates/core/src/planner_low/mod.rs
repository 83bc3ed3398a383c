//! Per-robot trajectory optimization by direct transcription.

mod seed;
mod transcription;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

pub use crate::agent::{ControlBounds, ControlInput, UnicycleState};
use crate::error::{Error, Result};
use crate::field::DetectionField;
use crate::gaussmix::GaussianMixture;
use crate::sensor::SensorModel;
use crate::tracker::KalmanTrack;

pub use seed::seed_controls;
pub use transcription::{solve_path, PathOptions, PathSolution, SolveStatus, Transcription};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub t: f64,
    pub state: UnicycleState,
    pub control: ControlInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub knots: Vec<Knot>,
    pub dt_knot: f64,
}

impl Trajectory {
    pub fn start_time(&self) -> f64 {
        self.knots.first().map_or(0.0, |k| k.t)
    }

    pub fn end_time(&self) -> f64 {
        self.knots.last().map_or(0.0, |k| k.t)
    }

    pub fn positions(&self) -> Vec<Vector2<f64>> {
        self.knots.iter().map(|k| k.state.position()).collect()
    }

    pub fn length(&self) -> f64 {
        self.knots.windows(2).map(|w| (w[1].state.position() - w[0].state.position()).norm()).sum()
    }

    /// Linear interpolation of knot values, clamped to the span.
    fn interpolate<T>(&self, t: f64, f: impl Fn(&Knot) -> T, lerp: impl Fn(T, T, f64) -> T) -> T {
        let n = self.knots.len();
        if n == 1 || t <= self.start_time() {
            return f(&self.knots[0]);
        }
        if t >= self.end_time() {
            return f(&self.knots[n - 1]);
        }
        let s = (t - self.start_time()) / self.dt_knot;
        let i = (s.floor() as usize).min(n - 2);
        lerp(f(&self.knots[i]), f(&self.knots[i + 1]), s - i as f64)
    }

    pub fn control_at_clamped(&self, t: f64) -> ControlInput {
        self.interpolate(t, |k| k.control, |a, b, w| ControlInput {
            v: a.v + w * (b.v - a.v),
            omega: a.omega + w * (b.omega - a.omega),
        })
    }

    pub fn position_at_clamped(&self, t: f64) -> Vector2<f64> {
        self.interpolate(t, |k| k.state.position(), |a, b, w| a + (b - a) * w)
    }

    /// Rows `t,x,y,theta,v,omega`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,x,y,theta,v,omega\n");
        for k in &self.knots {
            s.push_str(&format!(
                "{:.6},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                k.t, k.state.x, k.state.y, k.state.theta, k.control.v, k.control.omega
            ));
        }
        s
    }
}

/// Knot control interpolated at `t_query`.
pub fn extract_control(traj: &Trajectory, t_query: f64) -> Result<ControlInput> {
    let tol = 1e-9 * (1.0 + traj.end_time().abs());
    if traj.knots.is_empty() || t_query < traj.start_time() - tol || t_query > traj.end_time() + tol {
        return Err(Error::InvalidArgument(format!(
            "t = {t_query} outside trajectory span [{}, {}]",
            traj.start_time(),
            traj.end_time()
        )));
    }
    Ok(traj.control_at_clamped(t_query))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedKernel {
    /// Track at the objective's reference time.
    pub track: KalmanTrack,
    pub weight: f64,
}

/// Integrand of the path objective: detection probability of the untracked
/// belief plus weighted detection probabilities of tracked objects, whose
/// beliefs are predicted forward to each knot.
#[derive(Debug, Clone, PartialEq)]
pub struct PathObjective {
    pub belief: GaussianMixture,
    pub tracked: Vec<TrackedKernel>,
    pub sensor: SensorModel,
    pub robot_cov: Matrix2<f64>,
    /// Reference time of `tracked`.
    pub t_ref: f64,
    /// Step of the track models.
    pub model_dt: f64,
}

impl PathObjective {
    pub fn new(belief: GaussianMixture, sensor: SensorModel) -> Self {
        Self {
            belief,
            tracked: Vec::new(),
            sensor,
            robot_cov: Matrix2::zeros(),
            t_ref: 0.0,
            model_dt: crate::tracker::DEFAULT_DT,
        }
    }

    pub fn with_tracks(mut self, tracked: Vec<TrackedKernel>, t_ref: f64) -> Self {
        self.tracked = tracked;
        self.t_ref = t_ref;
        self
    }

    /// One field per knot time.
    pub fn fields(&self, times: &[f64]) -> Result<Vec<DetectionField>> {
        let base = DetectionField::from_belief(&self.sensor, &self.robot_cov, &self.belief)?;
        let mut out = Vec::with_capacity(times.len());
        let mut preds: Vec<(usize, KalmanTrack)> = self.tracked.iter().map(|k| (0, k.track.clone())).collect();
        for &t in times {
            let mut f = base.clone();
            let steps = ((t - self.t_ref) / self.model_dt).round().max(0.0) as usize;
            for ((done, tr), k) in preds.iter_mut().zip(&self.tracked) {
                if steps > *done {
                    *tr = tr.predict(steps - *done);
                    *done = steps;
                }
                if k.weight != 0.0 {
                    f.add_gaussian(&self.sensor, &self.robot_cov, &tr.position(), k.weight)?;
                }
            }
            out.push(f);
        }
        Ok(out)
    }
}

/// Trapezoidal quadrature of the objective integrand at the knots.
pub fn objective_along_path(obj: &PathObjective, traj: &Trajectory) -> Result<f64> {
    let times: Vec<f64> = traj.knots.iter().map(|k| k.t).collect();
    let fields = obj.fields(&times)?;
    Ok(trapezoid(traj.dt_knot, traj.knots.iter().zip(&fields).map(|(k, f)| f.value(&k.state.position()))))
}

pub(crate) fn trapezoid(h: f64, values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values
        .enumerate()
        .map(|(i, v)| if i == 0 || i + 1 == n { 0.5 * v } else { v })
        .sum::<f64>()
        * h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmix::Gaussian;

    fn line(n: usize, h: f64, y: f64, v: f64) -> Trajectory {
        Trajectory {
            knots: (0..n)
                .map(|i| Knot {
                    t: i as f64 * h,
                    state: UnicycleState::new(i as f64 * h * v, y, 0.0),
                    control: ControlInput { v, omega: 0.0 },
                })
                .collect(),
            dt_knot: h,
        }
    }

    #[test]
    fn zero_belief_zero_objective() {
        let obj = PathObjective::new(GaussianMixture::empty(), SensorModel::isotropic(0.5, 2).unwrap());
        assert_eq!(objective_along_path(&obj, &line(5, 0.5, 0.0, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn path_through_peak_beats_offset_path() {
        let g = Gaussian::isotropic(&[1.0, 0.0], 0.1).unwrap();
        let obj = PathObjective::new(GaussianMixture::single(1.0, g).unwrap(), SensorModel::isotropic(0.5, 2).unwrap());
        let through = objective_along_path(&obj, &line(5, 0.5, 0.0, 1.0)).unwrap();
        let off = objective_along_path(&obj, &line(5, 0.5, 3.0 * 0.6, 1.0)).unwrap();
        assert!(through > off);
    }

    #[test]
    fn control_extraction_interpolates() {
        let mut t = line(3, 1.0, 0.0, 1.0);
        t.knots[1].control.v = 2.0;
        assert_eq!(extract_control(&t, 1.0).unwrap().v, 2.0);
        assert!((extract_control(&t, 0.5).unwrap().v - 1.5).abs() < 1e-15);
        assert!(extract_control(&t, 2.5).is_err());
        assert!(extract_control(&t, -0.1).is_err());
    }
}
