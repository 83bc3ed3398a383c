//! Feasible initial guesses: an optional in-place turn followed by a
//! constant-curvature arc that ends exactly on the goal.

use nalgebra::{Matrix2, Vector2};

use crate::agent::{ControlBounds, ControlInput, UnicycleState};
use crate::linalg::wrap_angle;

/// Trapezoidal integration of the unicycle; explicit because the heading
/// update does not depend on position.
pub(crate) fn rollout(start: &UnicycleState, u: &[ControlInput], h: f64) -> Vec<[f64; 3]> {
    let mut s = vec![[start.x, start.y, start.theta]];
    for i in 1..u.len() {
        let [x, y, th] = s[i - 1];
        let th1 = th + 0.5 * h * (u[i - 1].omega + u[i].omega);
        s.push([
            x + 0.5 * h * (u[i - 1].v * th.cos() + u[i].v * th1.cos()),
            y + 0.5 * h * (u[i - 1].v * th.sin() + u[i].v * th1.sin()),
            th1,
        ]);
    }
    s
}

fn end_position(start: &UnicycleState, u: &[ControlInput], h: f64) -> Vector2<f64> {
    let s = rollout(start, u, h);
    let [x, y, _] = s[s.len() - 1];
    Vector2::new(x, y)
}

fn family(n: usize, k: usize, turn: f64, a: f64, v: f64) -> Vec<ControlInput> {
    (0..n)
        .map(|i| if i < k { ControlInput { v: 0.0, omega: turn } } else { ControlInput { v, omega: a } })
        .collect()
}

/// Controls over `n_knots` that reach `goal` at time `horizon`, within
/// `bounds`, or `None` if no member of the seed family connects.
pub fn seed_controls(
    start: &UnicycleState,
    goal: &Vector2<f64>,
    bounds: &ControlBounds,
    horizon: f64,
    n_knots: usize,
) -> Option<Vec<ControlInput>> {
    let n = n_knots;
    let h = horizon / (n - 1) as f64;
    let d = goal - start.position();
    if d.norm() < 1e-12 {
        return Some(vec![ControlInput::default(); n]);
    }
    let bearing = wrap_angle(d.y.atan2(d.x) - start.theta);
    let turn = bearing.signum() * bounds.omega_max;
    for k in 0..n - 1 {
        let rem = horizon - h * k as f64;
        let turned = if k == 0 { 0.0 } else { turn * h * (k as f64 - 0.5) };
        let phi = wrap_angle(bearing - turned);
        let chord = d.norm();
        let mut a = (2.0 * phi / rem).clamp(-bounds.omega_max, bounds.omega_max);
        let mut v = if phi.abs() > 1e-6 { chord * phi / (rem * phi.sin()) } else { chord / rem };
        v = v.clamp(0.0, bounds.v_max);
        for _ in 0..60 {
            let r = end_position(start, &family(n, k, turn, a, v), h) - goal;
            if r.norm() < 1e-11 {
                return Some(family(n, k, turn, a, v));
            }
            let e = 1e-7;
            let ra = (end_position(start, &family(n, k, turn, a + e, v), h) - goal - r) / e;
            let rv = (end_position(start, &family(n, k, turn, a, v + e), h) - goal - r) / e;
            let jac = Matrix2::from_columns(&[ra, rv]);
            let Some(step) = jac.lu().solve(&(-r)) else { break };
            let scale = (1.0f64).min(0.5 / step.norm().max(1e-300)).min(1.0);
            a = (a + scale * step[0]).clamp(-bounds.omega_max, bounds.omega_max);
            v = (v + scale * step[1]).clamp(0.0, bounds.v_max);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(start: UnicycleState, goal: Vector2<f64>, b: ControlBounds) {
        let u = seed_controls(&start, &goal, &b, 2.0, 21).expect("seed exists");
        assert!(u.iter().all(|c| b.contains(c)));
        assert!((end_position(&start, &u, 0.1) - goal).norm() < 1e-10);
    }

    #[test]
    fn straight_ahead_seed() {
        check(UnicycleState::new(0.0, 0.0, 0.0), Vector2::new(3.0, 0.0), ControlBounds::new(2.0, 2.0).unwrap());
    }

    #[test]
    fn seed_reaches_side_and_rear_goals() {
        let b = ControlBounds::new(2.0, 2.5).unwrap();
        let s = UnicycleState::new(1.0, 1.0, 0.4);
        for a in [0.5f64, 1.5, 2.5, -2.0, -3.0] {
            let r = 0.9 * 2.0 * (2.0 - wrap_angle(a - 0.4).abs() / 2.5) * 0.95;
            check(s, s.position() + Vector2::new(a.cos(), a.sin()) * r, b);
        }
    }

    #[test]
    fn no_seed_beyond_reach() {
        let b = ControlBounds::new(1.0, 1.0).unwrap();
        assert!(seed_controls(&UnicycleState::new(0.0, 0.0, 0.0), &Vector2::new(2.5, 0.0), &b, 2.0, 21).is_none());
    }
}
