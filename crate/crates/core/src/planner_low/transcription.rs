//! Trapezoidal transcription of the path problem and its augmented
//! Lagrangian solver.
//!
//! Decision vector: `[u_0, s_1, u_1, ..., s_{N-1}, u_{N-1}]` with
//! `s = (x, y, theta)` and `u = (v, omega)`; the start state is fixed.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use super::seed::{rollout, seed_controls};
use super::{Knot, PathObjective, Trajectory};
use crate::agent::{ControlBounds, ControlInput, UnicycleState};
use crate::error::{Error, Result};
use crate::field::DetectionField;
use crate::linalg::wrap_angle;

#[derive(Debug, Clone, PartialEq)]
pub struct PathOptions {
    pub n_knots: usize,
    pub t_start: f64,
    /// Optional terminal heading constraint.
    pub terminal_heading: Option<f64>,
    pub warm_start: Option<Trajectory>,
    /// Control-effort weight.
    pub reg_weight: f64,
    pub max_outer: usize,
    pub max_inner_total: usize,
    pub tol: f64,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            n_knots: 21,
            t_start: 0.0,
            terminal_heading: None,
            warm_start: None,
            reg_weight: 1e-4,
            max_outer: 15,
            max_inner_total: 120,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    /// Iteration limit reached; the best feasible iterate is returned.
    IterationLimit,
    /// The optimizer did not improve on its feasible seed.
    Seed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSolution {
    pub trajectory: Trajectory,
    /// Path integral of detection probability.
    pub objective: f64,
    pub status: SolveStatus,
    pub max_defect: f64,
    pub terminal_residual: f64,
}

pub struct Transcription {
    start: UnicycleState,
    goal: Vector2<f64>,
    heading: Option<f64>,
    bounds: ControlBounds,
    n: usize,
    h: f64,
    t0: f64,
    fields: Vec<DetectionField>,
    reg: f64,
}

fn knot_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i + 1 == n { 0.5 } else { 1.0 }
}

impl Transcription {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        start: UnicycleState,
        goal: Vector2<f64>,
        heading: Option<f64>,
        bounds: ControlBounds,
        horizon: f64,
        n_knots: usize,
        t0: f64,
        obj: &PathObjective,
        reg: f64,
    ) -> Result<Self> {
        if n_knots < 5 {
            return Err(Error::InvalidArgument(format!("need at least 5 knots, got {n_knots}")));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        let h = horizon / (n_knots - 1) as f64;
        let times: Vec<f64> = (0..n_knots).map(|i| t0 + i as f64 * h).collect();
        let fields = obj.fields(&times)?;
        Ok(Self { start, goal, heading, bounds, n: n_knots, h, t0, fields, reg })
    }

    pub fn n_vars(&self) -> usize {
        2 + 5 * (self.n - 1)
    }

    pub fn n_cons(&self) -> usize {
        3 * (self.n - 1) + 2 + usize::from(self.heading.is_some())
    }

    fn u_idx(i: usize) -> usize {
        if i == 0 { 0 } else { 5 * i }
    }

    fn s_idx(i: usize) -> usize {
        debug_assert!(i > 0);
        5 * i - 3
    }

    fn state(&self, z: &DVector<f64>, i: usize) -> [f64; 3] {
        if i == 0 {
            [self.start.x, self.start.y, self.start.theta]
        } else {
            let k = Self::s_idx(i);
            [z[k], z[k + 1], z[k + 2]]
        }
    }

    fn control(z: &DVector<f64>, i: usize) -> (f64, f64) {
        let k = Self::u_idx(i);
        (z[k], z[k + 1])
    }

    pub fn pack(&self, states: &[[f64; 3]], controls: &[ControlInput]) -> DVector<f64> {
        let mut z = DVector::zeros(self.n_vars());
        for i in 0..self.n {
            let k = Self::u_idx(i);
            z[k] = controls[i].v;
            z[k + 1] = controls[i].omega;
            if i > 0 {
                let k = Self::s_idx(i);
                z[k] = states[i][0];
                z[k + 1] = states[i][1];
                z[k + 2] = states[i][2];
            }
        }
        z
    }

    pub fn controls(&self, z: &DVector<f64>) -> Vec<ControlInput> {
        (0..self.n).map(|i| Self::control(z, i)).map(|(v, omega)| ControlInput { v, omega }).collect()
    }

    pub fn trajectory(&self, z: &DVector<f64>) -> Trajectory {
        Trajectory {
            knots: (0..self.n)
                .map(|i| {
                    let [x, y, th] = self.state(z, i);
                    let (v, omega) = Self::control(z, i);
                    Knot {
                        t: self.t0 + i as f64 * self.h,
                        state: UnicycleState::new(x, y, th),
                        control: ControlInput { v, omega },
                    }
                })
                .collect(),
            dt_knot: self.h,
        }
    }

    pub fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let nv = self.n_vars();
        let mut lo = DVector::from_element(nv, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(nv, f64::INFINITY);
        for i in 0..self.n {
            let k = Self::u_idx(i);
            lo[k] = 0.0;
            hi[k] = self.bounds.v_max;
            lo[k + 1] = -self.bounds.omega_max;
            hi[k + 1] = self.bounds.omega_max;
        }
        (lo, hi)
    }

    /// Path integral of the field at the knots.
    pub fn path_integral(&self, z: &DVector<f64>) -> f64 {
        super::trapezoid(
            self.h,
            (0..self.n).map(|i| {
                let [x, y, _] = self.state(z, i);
                self.fields[i].value(&Vector2::new(x, y))
            }),
        )
    }

    /// Minimized cost: negative path integral plus control effort.
    pub fn cost(&self, z: &DVector<f64>) -> f64 {
        let effort: f64 = (0..self.n)
            .map(|i| {
                let (v, w) = Self::control(z, i);
                knot_weight(i, self.n) * (v * v + w * w)
            })
            .sum();
        -self.path_integral(z) + self.reg * self.h * effort
    }

    pub fn cost_grad(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut g = DVector::zeros(self.n_vars());
        let mut f = 0.0;
        for i in 0..self.n {
            let w = knot_weight(i, self.n) * self.h;
            let [x, y, _] = self.state(z, i);
            let (val, grad) = self.fields[i].value_grad(&Vector2::new(x, y));
            f -= w * val;
            if i > 0 {
                let k = Self::s_idx(i);
                g[k] -= w * grad[0];
                g[k + 1] -= w * grad[1];
            }
            let k = Self::u_idx(i);
            let (v, om) = Self::control(z, i);
            f += self.reg * w * (v * v + om * om);
            g[k] += 2.0 * self.reg * w * v;
            g[k + 1] += 2.0 * self.reg * w * om;
        }
        (f, g)
    }

    fn dynamics(s: &[f64; 3], v: f64, om: f64) -> [f64; 3] {
        [v * s[2].cos(), v * s[2].sin(), om]
    }

    pub fn constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(self.n_cons());
        let hh = 0.5 * self.h;
        for i in 0..self.n - 1 {
            let s0 = self.state(z, i);
            let s1 = self.state(z, i + 1);
            let (v0, w0) = Self::control(z, i);
            let (v1, w1) = Self::control(z, i + 1);
            let f0 = Self::dynamics(&s0, v0, w0);
            let f1 = Self::dynamics(&s1, v1, w1);
            for r in 0..3 {
                c[3 * i + r] = s1[r] - s0[r] - hh * (f0[r] + f1[r]);
            }
        }
        let m = 3 * (self.n - 1);
        let [x, y, th] = self.state(z, self.n - 1);
        c[m] = x - self.goal.x;
        c[m + 1] = y - self.goal.y;
        if let Some(hd) = self.heading {
            c[m + 2] = wrap_angle(th - hd);
        }
        c
    }

    pub fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.n_cons(), self.n_vars());
        let hh = 0.5 * self.h;
        for i in 0..self.n - 1 {
            for (j, sign) in [(i, -1.0), (i + 1, 1.0)] {
                let s = self.state(z, j);
                let (v, _) = Self::control(z, j);
                let (sn, cs) = s[2].sin_cos();
                if j > 0 {
                    let k = Self::s_idx(j);
                    for r in 0..3 {
                        jac[(3 * i + r, k + r)] += sign;
                    }
                    jac[(3 * i, k + 2)] -= hh * (-v * sn);
                    jac[(3 * i + 1, k + 2)] -= hh * (v * cs);
                }
                let k = Self::u_idx(j);
                jac[(3 * i, k)] -= hh * cs;
                jac[(3 * i + 1, k)] -= hh * sn;
                jac[(3 * i + 2, k + 1)] -= hh;
            }
        }
        let m = 3 * (self.n - 1);
        let k = Self::s_idx(self.n - 1);
        jac[(m, k)] = 1.0;
        jac[(m + 1, k + 1)] = 1.0;
        if self.heading.is_some() {
            jac[(m + 2, k + 2)] = 1.0;
        }
        jac
    }

    fn max_defect(&self, z: &DVector<f64>) -> (f64, f64) {
        let c = self.constraints(z);
        let m = 3 * (self.n - 1);
        let defect = c.rows(0, m).amax();
        let term = c.rows(m, c.len() - m).amax();
        (defect, term)
    }

    fn from_controls(&self, u: &[ControlInput]) -> DVector<f64> {
        self.pack(&rollout(&self.start, u, self.h), u)
    }

    /// Terminal residual of the explicit rollout of `u`.
    fn rollout_residual(&self, u: &[ControlInput]) -> DVector<f64> {
        let s = rollout(&self.start, u, self.h);
        let [x, y, th] = s[self.n - 1];
        let mut r = vec![x - self.goal.x, y - self.goal.y];
        if let Some(hd) = self.heading {
            r.push(wrap_angle(th - hd));
        }
        DVector::from_vec(r)
    }

    /// Minimum-norm Newton correction of the controls so that the
    /// rollout meets the terminal constraint; interior controls only.
    fn terminal_fix(&self, mut u: Vec<ControlInput>, tol: f64) -> Option<Vec<ControlInput>> {
        for _ in 0..30 {
            let r = self.rollout_residual(&u);
            if r.amax() <= tol {
                return Some(u);
            }
            let nc = 2 * self.n;
            let mut jac = DMatrix::zeros(r.len(), nc);
            let e = 1e-7;
            for j in 0..nc {
                let (i, comp) = (j / 2, j % 2);
                let (val, lo, hi) = if comp == 0 {
                    (u[i].v, 0.0, self.bounds.v_max)
                } else {
                    (u[i].omega, -self.bounds.omega_max, self.bounds.omega_max)
                };
                if val <= lo + 1e-9 || val >= hi - 1e-9 {
                    continue;
                }
                let mut up = u.clone();
                if comp == 0 { up[i].v += e } else { up[i].omega += e }
                jac.set_column(j, &((self.rollout_residual(&up) - &r) / e));
            }
            let jjt = &jac * jac.transpose() + DMatrix::identity(r.len(), r.len()) * 1e-14;
            let y = jjt.cholesky()?.solve(&(-&r));
            let step = jac.transpose() * y;
            for (j, d) in step.iter().enumerate() {
                let i = j / 2;
                if j % 2 == 0 {
                    u[i].v = (u[i].v + d).clamp(0.0, self.bounds.v_max);
                } else {
                    u[i].omega = (u[i].omega + d).clamp(-self.bounds.omega_max, self.bounds.omega_max);
                }
            }
        }
        (self.rollout_residual(&u).amax() <= tol).then_some(u)
    }
}

/// Positions, headings and their sensitivities to the controls along the
/// explicit trapezoidal rollout.
struct Condensed {
    states: Vec<[f64; 3]>,
    /// `dpos[i]` is 2 x 2N: derivative of knot `i` position w.r.t. `[v_0, w_0, v_1, ...]`.
    dpos: Vec<DMatrix<f64>>,
    /// Derivative of the final heading.
    dtheta_end: DVector<f64>,
}

impl Transcription {
    fn condense(&self, u: &[ControlInput]) -> Condensed {
        let n = self.n;
        let h = self.h;
        let states = rollout(&self.start, u, h);
        let nc = 2 * n;
        // dtheta_k / d omega_j: h/2 for the endpoints j = 0, k and h between.
        let coef = |j: usize, k: usize| -> f64 {
            if j > k || k == 0 { 0.0 } else if j == 0 || j == k { 0.5 * h } else { h }
        };
        let mut dpos = Vec::with_capacity(n);
        for k in 0..n {
            let mut m = DMatrix::zeros(2, nc);
            for j in 0..=k {
                let cj = coef(j, k);
                if cj == 0.0 {
                    continue;
                }
                let th = states[j][2];
                m[(0, 2 * j)] += cj * th.cos();
                m[(1, 2 * j)] += cj * th.sin();
                // Heading at knot j depends on omega_q for q <= j.
                let vj = u[j].v;
                for q in 0..=j {
                    let dt = coef(q, j);
                    if dt == 0.0 {
                        continue;
                    }
                    m[(0, 2 * q + 1)] -= cj * vj * th.sin() * dt;
                    m[(1, 2 * q + 1)] += cj * vj * th.cos() * dt;
                }
            }
            dpos.push(m);
        }
        let dtheta_end = DVector::from_fn(nc, |j, _| if j % 2 == 1 { coef(j / 2, n - 1) } else { 0.0 });
        Condensed { states, dpos, dtheta_end }
    }

    /// Cost over controls with the defects eliminated and its gradient.
    fn condensed_cost(&self, u: &[ControlInput], cd: &Condensed) -> (f64, DVector<f64>) {
        let nc = 2 * self.n;
        let mut f = 0.0;
        let mut g = DVector::zeros(nc);
        for i in 0..self.n {
            let w = knot_weight(i, self.n) * self.h;
            let p = Vector2::new(cd.states[i][0], cd.states[i][1]);
            let (val, grad) = self.fields[i].value_grad(&p);
            f -= w * val;
            if i > 0 {
                g -= cd.dpos[i].tr_mul(&grad) * w;
            }
            f += self.reg * w * (u[i].v * u[i].v + u[i].omega * u[i].omega);
            g[2 * i] += 2.0 * self.reg * w * u[i].v;
            g[2 * i + 1] += 2.0 * self.reg * w * u[i].omega;
        }
        (f, g)
    }

    /// Exact Hessian over the controls of the cost plus
    /// `lam' r + rho/2 |r|^2` on the terminal residual.
    fn condensed_hessian(&self, u: &[ControlInput], cd: &Condensed, lam: &DVector<f64>, rho: f64) -> DMatrix<f64> {
        let n = self.n;
        let h = self.h;
        let nc = 2 * n;
        let coef = |j: usize, k: usize| -> f64 {
            if j > k || k == 0 { 0.0 } else if j == 0 || j == k { 0.5 * h } else { h }
        };
        let mut hess = DMatrix::zeros(nc, nc);
        let r = self.terminal_residual(cd);
        // mu_k: gradient of the knot term w.r.t. the knot position.
        let mut mu = vec![Vector2::zeros(); n];
        for k in 1..n {
            let w = knot_weight(k, n) * h;
            let p = Vector2::new(cd.states[k][0], cd.states[k][1]);
            let (_, grad, hf) = self.fields[k].value_grad_hess(&p);
            let mut hk = -hf * w;
            mu[k] = -grad * w;
            if k == n - 1 {
                mu[k] += Vector2::new(lam[0] + rho * r[0], lam[1] + rho * r[1]);
                hk += nalgebra::Matrix2::identity() * rho;
            }
            let hk = DMatrix::from_column_slice(2, 2, hk.as_slice());
            hess += cd.dpos[k].transpose() * hk * &cd.dpos[k];
        }
        if self.heading.is_some() {
            hess += &cd.dtheta_end * cd.dtheta_end.transpose() * rho;
        }
        // Curvature of the rollout itself.
        for j in 0..n {
            let mut a = Vector2::zeros();
            for (k, m) in mu.iter().enumerate().skip(j.max(1)) {
                a += m * coef(j, k);
            }
            if a == Vector2::zeros() {
                continue;
            }
            let (sn, cs) = cd.states[j][2].sin_cos();
            let vw = -a.x * sn + a.y * cs;
            let ww = u[j].v * (-a.x * cs - a.y * sn);
            for q in 0..=j {
                let dq = coef(q, j);
                if dq == 0.0 {
                    continue;
                }
                hess[(2 * j, 2 * q + 1)] += vw * dq;
                hess[(2 * q + 1, 2 * j)] += vw * dq;
                for q2 in 0..=j {
                    let dq2 = coef(q2, j);
                    if dq2 != 0.0 {
                        hess[(2 * q + 1, 2 * q2 + 1)] += ww * dq * dq2;
                    }
                }
            }
        }
        for i in 0..n {
            let w = knot_weight(i, n) * h;
            hess[(2 * i, 2 * i)] += 2.0 * self.reg * w;
            hess[(2 * i + 1, 2 * i + 1)] += 2.0 * self.reg * w;
        }
        hess
    }

    fn terminal_jacobian(&self, cd: &Condensed) -> DMatrix<f64> {
        let nc = 2 * self.n;
        let rows = 2 + usize::from(self.heading.is_some());
        let mut j = DMatrix::zeros(rows, nc);
        j.rows_mut(0, 2).copy_from(&cd.dpos[self.n - 1]);
        if self.heading.is_some() {
            j.row_mut(2).copy_from(&cd.dtheta_end.transpose());
        }
        j
    }

    fn terminal_residual(&self, cd: &Condensed) -> DVector<f64> {
        let [x, y, th] = cd.states[self.n - 1];
        let mut r = vec![x - self.goal.x, y - self.goal.y];
        if let Some(hd) = self.heading {
            r.push(wrap_angle(th - hd));
        }
        DVector::from_vec(r)
    }

    /// Gradient of the control-space cost, exposed for derivative checks.
    pub fn control_cost_grad(&self, u: &[ControlInput]) -> (f64, DVector<f64>) {
        let cd = self.condense(u);
        self.condensed_cost(u, &cd)
    }

    pub fn control_cost(&self, u: &[ControlInput]) -> f64 {
        self.cost(&self.from_controls(u))
    }
}

fn to_controls(x: &DVector<f64>) -> Vec<ControlInput> {
    (0..x.len() / 2).map(|i| ControlInput { v: x[2 * i], omega: x[2 * i + 1] }).collect()
}

fn from_controls_vec(u: &[ControlInput]) -> DVector<f64> {
    DVector::from_iterator(2 * u.len(), u.iter().flat_map(|c| [c.v, c.omega]))
}

fn clamp_box(z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(z.len(), z.iter().zip(lo.iter().zip(hi.iter())).map(|(&v, (&l, &h))| v.clamp(l, h)))
}

const INNER_PER_OUTER: usize = 25;

struct AlState {
    u: Vec<ControlInput>,
    converged: bool,
}

/// Augmented Lagrangian on the terminal constraint; the inner problem is a
/// bound-constrained Newton iteration with Levenberg-Marquardt damping over the controls.
fn augmented_lagrangian(tr: &Transcription, u0: &[ControlInput], opts: &PathOptions) -> AlState {
    let n = tr.n;
    let lo = DVector::from_fn(2 * n, |j, _| if j % 2 == 0 { 0.0 } else { -tr.bounds.omega_max });
    let hi = DVector::from_fn(2 * n, |j, _| if j % 2 == 0 { tr.bounds.v_max } else { tr.bounds.omega_max });
    let mut x = clamp_box(&from_controls_vec(u0), &lo, &hi);
    let rows = 2 + usize::from(tr.heading.is_some());
    let mut lam = DVector::zeros(rows);
    let mut rho = 100.0;
    let mut budget = opts.max_inner_total;
    let mut prev_r = f64::INFINITY;
    let span = &hi - &lo;
    let mut mu = 1e-3;
    let merit = |x: &DVector<f64>, lam: &DVector<f64>, rho: f64| -> f64 {
        let u = to_controls(x);
        let cd = tr.condense(&u);
        let (f, _) = tr.condensed_cost(&u, &cd);
        let r = tr.terminal_residual(&cd);
        f + lam.dot(&r) + 0.5 * rho * r.norm_squared()
    };
    for _ in 0..opts.max_outer {
        let inner_tol = 1e-10_f64.max(1e-3 / rho);
        let mut stalled = false;
        let mut flat = 0;
        let mut inner = 0;
        while budget > 0 && flat < 3 && inner < INNER_PER_OUTER {
            budget -= 1;
            inner += 1;
            let u = to_controls(&x);
            let cd = tr.condense(&u);
            let (_, gf) = tr.condensed_cost(&u, &cd);
            let r = tr.terminal_residual(&cd);
            let jr = tr.terminal_jacobian(&cd);
            let g = gf + jr.tr_mul(&(&lam + &r * rho));
            let pg = (&x - clamp_box(&(&x - &g), &lo, &hi)).amax();
            if pg < inner_tol {
                break;
            }
            let hess = tr.condensed_hessian(&u, &cd, &lam, rho);
            let eps = pg.min(1e-3);
            let free: Vec<usize> = (0..x.len())
                .filter(|&j| {
                    let band = eps * (hi[j] - lo[j]);
                    !((x[j] <= lo[j] + band && g[j] > 0.0) || (x[j] >= hi[j] - band && g[j] < 0.0))
                })
                .collect();
            let nf = free.len();
            // Levenberg-Marquardt step in box-scaled variables.
            let hff = DMatrix::from_fn(nf, nf, |a, b| hess[(free[a], free[b])] * span[free[a]] * span[free[b]]);
            let gff = DVector::from_fn(nf, |a, _| g[free[a]] * span[free[a]]);
            let m0 = merit(&x, &lam, rho);
            let mut accepted = false;
            for _ in 0..30 {
                let mut m = hff.clone();
                for a in 0..nf {
                    m[(a, a)] += mu;
                }
                let Some(ch) = m.cholesky() else {
                    mu = (mu * 4.0).max(1e-8);
                    continue;
                };
                let d = ch.solve(&(-&gff));
                let mut cand = x.clone();
                for (a, &j) in free.iter().enumerate() {
                    cand[j] += d[a] * span[j];
                }
                let cand = clamp_box(&cand, &lo, &hi);
                let step = DVector::from_fn(nf, |a, _| (cand[free[a]] - x[free[a]]) / span[free[a]]);
                let pred = -(gff.dot(&step) + 0.5 * step.dot(&(&hff * &step)));
                if step.amax() < 1e-14 || pred <= 0.0 {
                    mu = (mu * 4.0).max(1e-8);
                    continue;
                }
                let ratio = (m0 - merit(&cand, &lam, rho)) / pred;
                if ratio > 1e-4 {
                    let gain = m0 - merit(&cand, &lam, rho);
                    flat = if gain < 1e-6 * (1.0 + m0.abs()) { flat + 1 } else { 0 };
                    x = cand;
                    accepted = true;
                    if ratio > 0.75 {
                        mu /= 3.0;
                    } else if ratio < 0.25 {
                        mu *= 2.0;
                    }
                    break;
                }
                mu = (mu * 4.0).max(1e-8);
            }
            if !accepted {
                stalled = true;
                break;
            }
        }
        let cd = tr.condense(&to_controls(&x));
        let r = tr.terminal_residual(&cd);
        let rn = r.amax();
        if rn < 1e-6 {
            return AlState { u: to_controls(&x), converged: !stalled && budget > 0 };
        }
        if budget == 0 || (stalled && inner == 1) {
            break;
        }
        lam += &r * rho;
        if rn > 0.25 * prev_r {
            rho = (rho * 10.0).min(1e10);
        }
        prev_r = rn;
    }
    AlState { u: to_controls(&x), converged: false }
}

/// Locally optimal path from `start` to `goal` in time `horizon`.
pub fn solve_path(
    start: &UnicycleState,
    goal: &Vector2<f64>,
    obj: &PathObjective,
    bounds: &ControlBounds,
    horizon: f64,
    opts: &PathOptions,
) -> Result<PathSolution> {
    let dist = (goal - start.position()).norm();
    if dist > bounds.v_max * horizon * (1.0 + 1e-12) {
        return Err(Error::InfeasiblePath(format!(
            "goal {dist:.3} m away exceeds reach {:.3} m",
            bounds.v_max * horizon
        )));
    }
    let tr = Transcription::new(
        *start,
        *goal,
        opts.terminal_heading,
        *bounds,
        horizon,
        opts.n_knots,
        opts.t_start,
        obj,
        opts.reg_weight,
    )?;
    let n = opts.n_knots;
    let seed = seed_controls(start, goal, bounds, horizon, n)
        .and_then(|u| if opts.terminal_heading.is_some() { tr.terminal_fix(u, 1e-9) } else { Some(u) });
    let seed_z = seed.as_ref().map(|u| tr.from_controls(u));

    let init = match &opts.warm_start {
        Some(prev) => {
            let u: Vec<ControlInput> = (0..n)
                .map(|i| bounds.clamp(prev.control_at_clamped(opts.t_start + i as f64 * tr.h)))
                .collect();
            tr.from_controls(&u)
        }
        None => match &seed_z {
            Some(z) => z.clone(),
            None => {
                let u = vec![ControlInput { v: dist / horizon, omega: 0.0 }; n];
                tr.from_controls(&u)
            }
        },
    };
    let al = augmented_lagrangian(&tr, &tr.controls(&init), opts);
    // The terminal point is restored exactly by a small control correction.
    let polished = tr.terminal_fix(al.u, 1e-9).map(|u| tr.from_controls(&u));
    let within = |z: &DVector<f64>| {
        let (d, t) = tr.max_defect(z);
        d <= opts.tol && t <= opts.tol
    };
    let candidate = polished.filter(&within);
    let (z, status) = match (candidate, seed_z) {
        (Some(c), Some(s)) => {
            if tr.path_integral(&c) + 1e-12 >= tr.path_integral(&s) {
                (c, if al.converged { SolveStatus::Converged } else { SolveStatus::IterationLimit })
            } else {
                (s, SolveStatus::Seed)
            }
        }
        (Some(c), None) => (c, if al.converged { SolveStatus::Converged } else { SolveStatus::IterationLimit }),
        (None, Some(s)) => (s, SolveStatus::Seed),
        (None, None) => {
            return Err(Error::InfeasiblePath("no dynamically feasible connection to the goal".into()))
        }
    };
    if status == SolveStatus::IterationLimit {
        log::debug!("path solve hit its iteration limit; returning best feasible iterate");
    }
    let (max_defect, terminal_residual) = tr.max_defect(&z);
    Ok(PathSolution {
        objective: tr.path_integral(&z),
        trajectory: tr.trajectory(&z),
        status,
        max_defect,
        terminal_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmix::{Gaussian, GaussianMixture};
    use crate::sensor::SensorModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn objective(peak: Option<[f64; 2]>) -> PathObjective {
        let belief = match peak {
            Some(p) => GaussianMixture::single(1.0, Gaussian::isotropic(&p, 0.2).unwrap()).unwrap(),
            None => GaussianMixture::empty(),
        };
        PathObjective::new(belief, SensorModel::isotropic(0.5, 2).unwrap())
    }

    fn problem(heading: Option<f64>) -> Transcription {
        Transcription::new(
            UnicycleState::new(0.0, 0.0, 0.2),
            Vector2::new(2.0, 0.5),
            heading,
            ControlBounds::new(1.5, 2.0).unwrap(),
            2.0,
            9,
            0.0,
            &objective(Some([1.0, 0.8])),
            1e-4,
        )
        .unwrap()
    }

    #[test]
    fn cost_gradient_matches_finite_differences() {
        let tr = problem(None);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let z = DVector::from_fn(tr.n_vars(), |_, _| rng.random_range(-1.0..1.0));
            let (_, g) = tr.cost_grad(&z);
            for j in 0..z.len() {
                let e = 1e-6;
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += e;
                zm[j] -= e;
                let fd = (tr.cost(&zp) - tr.cost(&zm)) / (2.0 * e);
                assert!((fd - g[j]).abs() <= 1e-5 * (1.0 + fd.abs()), "var {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn constraint_jacobian_matches_finite_differences() {
        let tr = problem(Some(0.3));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = DVector::from_fn(tr.n_vars(), |_, _| rng.random_range(-1.0..1.0));
        let jac = tr.jacobian(&z);
        for j in 0..z.len() {
            let e = 1e-6;
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += e;
            zm[j] -= e;
            let fd = (tr.constraints(&zp) - tr.constraints(&zm)) / (2.0 * e);
            for r in 0..fd.len() {
                assert!((fd[r] - jac[(r, j)]).abs() < 1e-6, "({r},{j})");
            }
        }
    }

    #[test]
    fn straight_goal_at_full_reach_is_constant_speed() {
        let b = ControlBounds::new(1.5, 2.0).unwrap();
        let sol = solve_path(
            &UnicycleState::new(0.0, 0.0, 0.0),
            &Vector2::new(3.0, 0.0),
            &objective(None),
            &b,
            2.0,
            &PathOptions::default(),
        )
        .unwrap();
        for k in &sol.trajectory.knots {
            assert!((k.control.v - 1.5).abs() < 1e-5 && k.state.y.abs() < 1e-5);
        }
        assert!(sol.terminal_residual <= 1e-4 && sol.max_defect <= 1e-4);
    }

    #[test]
    fn goal_out_of_reach_is_infeasible() {
        let b = ControlBounds::new(1.0, 2.0).unwrap();
        let r = solve_path(
            &UnicycleState::new(0.0, 0.0, 0.0),
            &Vector2::new(5.0, 0.0),
            &objective(None),
            &b,
            2.0,
            &PathOptions::default(),
        );
        assert!(matches!(r, Err(Error::InfeasiblePath(_))));
    }

    #[test]
    fn terminal_heading_is_honoured() {
        let b = ControlBounds::new(1.5, 2.0).unwrap();
        let opts = PathOptions { terminal_heading: Some(1.0), ..Default::default() };
        let sol = solve_path(
            &UnicycleState::new(0.0, 0.0, 0.0),
            &Vector2::new(1.5, 0.8),
            &objective(Some([1.0, 0.0])),
            &b,
            2.0,
            &opts,
        )
        .unwrap();
        let last = sol.trajectory.knots.last().unwrap();
        assert!(wrap_angle(last.state.theta - 1.0).abs() < 1e-4);
    }
}
