//! Convex terminal sets that guarantee tracking detection probability.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, spd_inverse_det};
use crate::sensor::SensorModel;
use crate::tracker::KalmanTrack;

/// `{x : (x - center)' shape^-1 (x - center) <= radius_sq}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityEllipsoid {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub radius_sq: f64,
    pub feasible: bool,
}

/// Right-hand side `-2 ln((1 - alpha) |2 pi S|^(1/2) / zeta)` with `zeta`
/// the weight of a density-normalized mixand.
pub fn normalized_radius_sq(zeta: f64, shape: &DMatrix<f64>, alpha: f64) -> f64 {
    let det = (shape * (2.0 * std::f64::consts::PI)).determinant();
    -2.0 * ((1.0 - alpha) * det.sqrt() / zeta).ln()
}

/// Weight of a peak-height mixand expressed as a density weight.
fn density_weight(zeta: f64, cov: &DMatrix<f64>) -> f64 {
    zeta * (cov * (2.0 * std::f64::consts::PI)).determinant().sqrt()
}

fn single_mixand(sensor: &SensorModel) -> Result<&crate::sensor::SensorMixand> {
    match sensor.mixands() {
        [m] => Ok(m),
        _ => Err(Error::InvalidArgument(format!(
            "feasibility ellipsoid needs a single-mixand sensor, got {}",
            sensor.n_mixands()
        ))),
    }
}

pub fn feasibility_ellipsoid(
    sensor: &SensorModel,
    robot_cov: &DMatrix<f64>,
    track: &KalmanTrack,
    alpha: f64,
) -> Result<FeasibilityEllipsoid> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} not in (0, 1)")));
    }
    let m = single_mixand(sensor)?;
    let pos = track.position();
    check_dim(m.offset.len(), pos.dim())?;
    check_dim(m.offset.len(), robot_cov.nrows())?;
    let shape = linalg::symmetrize(&(&m.cov + robot_cov + pos.cov()));
    let radius_sq = normalized_radius_sq(density_weight(m.zeta, &m.cov), &shape, alpha);
    let radius_sq = if radius_sq.is_nan() { f64::NEG_INFINITY } else { radius_sq };
    Ok(FeasibilityEllipsoid {
        center: pos.mean() + &m.offset,
        shape,
        radius_sq,
        feasible: radius_sq > 0.0,
    })
}

impl FeasibilityEllipsoid {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn level(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        let inv = self.shape.clone().try_inverse().expect("shape is SPD");
        linalg::quad_form(&inv, &d)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.feasible && self.level(x) <= self.radius_sq * (1.0 + 1e-12)
    }

    /// Euclidean projection onto the ellipsoid; `None` when infeasible.
    pub fn project(&self, y: &DVector<f64>) -> Option<DVector<f64>> {
        if !self.feasible {
            return None;
        }
        if self.level(y) <= self.radius_sq {
            return Some(y.clone());
        }
        let eig = self.shape.clone().symmetric_eigen();
        let lam: Vec<f64> = eig.eigenvalues.iter().map(|&s| 1.0 / s).collect();
        let z = eig.eigenvectors.transpose() * (y - &self.center);
        // g(mu) = sum lam_i z_i^2 / (1 + mu lam_i)^2 decreases from g(0) > r^2.
        let g = |mu: f64| -> f64 {
            lam.iter().zip(z.iter()).map(|(&l, &zi)| l * zi * zi / (1.0 + mu * l).powi(2)).sum()
        };
        let mut lo = 0.0;
        let mut hi = 1.0;
        while g(hi) > self.radius_sq {
            hi *= 2.0;
            if hi > 1e300 {
                break;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > self.radius_sq {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let w = DVector::from_iterator(z.len(), lam.iter().zip(z.iter()).map(|(&l, &zi)| zi / (1.0 + hi * l)));
        Some(&self.center + &eig.eigenvectors * w)
    }

    /// Point at unit-ball coordinates `u` (|u| <= 1) mapped into the ellipsoid.
    pub fn from_unit(&self, u: &DVector<f64>) -> DVector<f64> {
        let l = self.shape.clone().cholesky().expect("shape is SPD").l();
        &self.center + l * u * self.radius_sq.max(0.0).sqrt()
    }

    /// Uniform sample from the interior.
    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = rng.random::<f64>().powf(1.0 / n as f64);
        self.from_unit(&(g.normalize() * r))
    }
}

/// Jensen lower bound on the log detection probability at robot mean `x`:
/// `sum_l p_l ln(t_l(x) / p_l)` with `t_l` the per-mixand terms and `p_l`
/// proportional to the density weights.
pub fn jensen_log_bound(
    sensor: &SensorModel,
    robot_cov: &DMatrix<f64>,
    track: &KalmanTrack,
    x: &DVector<f64>,
) -> Result<f64> {
    let pos = track.position();
    check_dim(sensor.dim(), x.len())?;
    check_dim(sensor.dim(), pos.dim())?;
    let weights: Vec<f64> = sensor.mixands().iter().map(|m| density_weight(m.zeta, &m.cov)).collect();
    let total: f64 = weights.iter().sum();
    let mut bound = 0.0;
    for (m, w) in sensor.mixands().iter().zip(&weights) {
        let s = &m.cov + robot_cov + pos.cov();
        let (inv, det) = spd_inverse_det(&s)?;
        let d = x - &m.offset - pos.mean();
        let ln_norm = -0.5 * (det * (2.0 * std::f64::consts::PI).powi(x.len() as i32)).ln();
        let ln_t = w.ln() + ln_norm - 0.5 * linalg::quad_form(&inv, &d);
        let p = w / total;
        bound += p * (ln_t - p.ln());
    }
    Ok(bound)
}

/// True only if the tracking chance constraint provably holds at `x`.
pub fn jensen_inner_bound(
    sensor: &SensorModel,
    robot_cov: &DMatrix<f64>,
    track: &KalmanTrack,
    alpha: f64,
    x: &DVector<f64>,
) -> Result<bool> {
    Ok(jensen_log_bound(sensor, robot_cov, track, x)? >= (1.0 - alpha).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::SensorMixand;
    use crate::tracker::LtiModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn track_at(x: f64, y: f64, var: f64) -> KalmanTrack {
        let mut cov = DMatrix::identity(4, 4) * 0.01;
        cov[(0, 0)] = var;
        cov[(1, 1)] = var;
        KalmanTrack::new(0, DVector::from_column_slice(&[x, y, 0.0, 0.0]), cov, LtiModel::default_planar(), 0.0)
            .unwrap()
    }

    #[test]
    fn density_normalized_radius_example() {
        let r = normalized_radius_sq(1.0, &(DMatrix::identity(2, 2) * 0.04), 0.45);
        let want = -2.0 * (0.55 * 2.0 * std::f64::consts::PI * 0.04f64).ln();
        assert!((r - want).abs() < 1e-12);
        assert!((r - 3.9577).abs() < 1e-4);
    }

    #[test]
    fn alpha_near_one_always_feasible() {
        let s = SensorModel::isotropic(0.5, 2).unwrap();
        let e = feasibility_ellipsoid(&s, &DMatrix::zeros(2, 2), &track_at(0.0, 0.0, 50.0), 1.0 - 1e-12).unwrap();
        assert!(e.feasible && e.radius_sq > 10.0);
    }

    #[test]
    fn wide_track_is_infeasible() {
        let s = SensorModel::isotropic(0.5, 2).unwrap();
        let e = feasibility_ellipsoid(&s, &DMatrix::zeros(2, 2), &track_at(0.0, 0.0, 1.0), 0.45).unwrap();
        assert!(!e.feasible);
        assert!(e.project(&DVector::zeros(2)).is_none());
    }

    #[test]
    fn boundary_points_hit_one_minus_alpha() {
        let s = SensorModel::new(vec![SensorMixand::new(
            1.0,
            DVector::from_column_slice(&[0.2, -0.1]),
            DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]),
        )
        .unwrap()])
        .unwrap();
        let rc = DMatrix::identity(2, 2) * 0.01;
        let t = track_at(1.0, 2.0, 0.02);
        let e = feasibility_ellipsoid(&s, &rc, &t, 0.45).unwrap();
        assert!(e.feasible);
        for k in 0..12 {
            let a = k as f64 * 0.5235987755982988;
            let x = e.from_unit(&DVector::from_column_slice(&[a.cos(), a.sin()]));
            let p = s.detect_prob_gaussian(&x, &rc, &t.position()).unwrap();
            assert!((p - 0.55).abs() < 1e-9, "{p}");
        }
    }

    #[test]
    fn projection_lands_on_boundary_and_is_closest() {
        let s = SensorModel::isotropic(0.5, 2).unwrap();
        let e = feasibility_ellipsoid(&s, &DMatrix::zeros(2, 2), &track_at(0.0, 0.0, 0.05), 0.45).unwrap();
        let y = DVector::from_column_slice(&[3.0, 1.0]);
        let p = e.project(&y).unwrap();
        assert!((e.level(&p) - e.radius_sq).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let q = e.sample_interior(&mut rng);
            assert!((q - &y).norm() >= (&p - &y).norm() - 1e-9);
        }
    }

    #[test]
    fn jensen_is_exact_for_one_mixand() {
        let s = SensorModel::isotropic(0.5, 2).unwrap();
        let rc = DMatrix::identity(2, 2) * 0.01;
        let t = track_at(0.0, 0.0, 0.05);
        let x = DVector::from_column_slice(&[0.3, 0.2]);
        let b = jensen_log_bound(&s, &rc, &t, &x).unwrap();
        let p = s.detect_prob_gaussian(&x, &rc, &t.position()).unwrap();
        assert!((b - p.ln()).abs() < 1e-12);
    }

    #[test]
    fn jensen_clustered_mixands_at_centroid() {
        let mk = |cx: f64, cy: f64| {
            SensorMixand::new(1.0, DVector::from_column_slice(&[cx, cy]), DMatrix::identity(2, 2) * 0.25).unwrap()
        };
        let s = SensorModel::normalized(vec![mk(0.05, 0.0), mk(-0.05, 0.03), mk(0.0, -0.04)]).unwrap();
        let rc = DMatrix::identity(2, 2) * 0.001;
        let t = track_at(0.0, 0.0, 0.005);
        let x = DVector::zeros(2);
        assert!(jensen_inner_bound(&s, &rc, &t, 0.45, &x).unwrap());
        assert!(s.detect_prob_gaussian(&x, &rc, &t.position()).unwrap() >= 0.55);
        let far = DVector::from_column_slice(&[10.0, 0.0]);
        assert!(!jensen_inner_bound(&s, &rc, &t, 0.45, &far).unwrap());
    }
}
