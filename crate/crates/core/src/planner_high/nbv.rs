//! Next-best-view placement of terminal robot positions.

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::AgentState;
use crate::error::{Error, Result};
use crate::field::DetectionField;
use crate::gaussmix::GaussianMixture;
use crate::linalg::{from_mat2, to_vec2};
use crate::sensor::SensorModel;
use crate::tracker::KalmanTrack;

use super::assignment::AssignmentResult;
use super::coarse::ReachRegion;
use super::feasibility::{feasibility_ellipsoid, FeasibilityEllipsoid};

const MIN_STEP: f64 = 1e-3;
const INIT_STEP: f64 = 0.5;
const MAX_ASCENT_ITERS: usize = 400;
const BOUNDARY_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbvParams {
    pub alpha: f64,
    /// Minimum distance between exploring viewpoints.
    pub separation: f64,
    pub horizon: f64,
    pub top_k: usize,
    pub random_starts: usize,
}

impl NbvParams {
    pub fn new(alpha: f64, separation: f64, horizon: f64) -> Self {
        Self { alpha, separation, horizon, top_k: 5, random_starts: 4 }
    }
}

/// Separation that keeps two-sigma sensor footprints from overlapping.
pub fn default_separation(sensor: &SensorModel) -> f64 {
    sensor
        .mixands()
        .iter()
        .map(|m| {
            let sigma = m.cov.symmetric_eigenvalues().max().sqrt();
            4.0 * sigma + m.offset.norm()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub position: Vector2<f64>,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackConstraint {
    pub track_id: u64,
    pub robot_id: usize,
    pub ellipsoid: FeasibilityEllipsoid,
    /// The ellipsoid intersects the robot's reachable region.
    pub reachable: bool,
}

impl TrackConstraint {
    pub fn satisfiable(&self) -> bool {
        self.ellipsoid.feasible && self.reachable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbvSolution {
    pub viewpoints: BTreeMap<usize, Viewpoint>,
    pub assignment: AssignmentResult,
    pub objective_value: f64,
    pub feasible: bool,
    pub constraints: Vec<TrackConstraint>,
    /// Robot pairs closer than the separation where at least one is a tracker.
    pub separation_violations: Vec<(usize, usize)>,
}

impl NbvSolution {
    pub fn infeasible_tracks(&self) -> Vec<u64> {
        self.constraints.iter().filter(|c| !c.satisfiable()).map(|c| c.track_id).collect()
    }
}

fn gain(field: &DetectionField, p: &Vector2<f64>) -> f64 {
    field.value(p).min(1.0)
}

/// Normalized-step ascent; `project` returns an admissible point or `None`.
fn ascend(
    field: &DetectionField,
    start: Vector2<f64>,
    project: &dyn Fn(&Vector2<f64>) -> Option<Vector2<f64>>,
) -> (Vector2<f64>, f64) {
    let mut x = start;
    let mut fx = gain(field, &x);
    let mut step = INIT_STEP;
    for _ in 0..MAX_ASCENT_ITERS {
        if step < MIN_STEP {
            break;
        }
        let (v, g) = field.value_grad(&x);
        let gn = g.norm();
        if gn < 1e-14 || v >= 1.0 {
            break;
        }
        match project(&(x + g * (step / gn))) {
            Some(c) if gain(field, &c) > fx + 1e-15 => {
                x = c;
                fx = gain(field, &c);
            }
            _ => step *= 0.5,
        }
    }
    (x, fx)
}

fn best_of(
    field: &DetectionField,
    starts: &[Vector2<f64>],
    project: &dyn Fn(&Vector2<f64>) -> Option<Vector2<f64>>,
) -> Option<(Vector2<f64>, f64)> {
    let mut best: Option<(Vector2<f64>, f64)> = None;
    for s in starts {
        let Some(p) = project(s) else { continue };
        let (x, f) = ascend(field, p, project);
        if best.is_none_or(|(_, bf)| f > bf + 1e-12) {
            best = Some((x, f));
        }
    }
    best
}

fn mode_starts(belief: &GaussianMixture, k: usize) -> Vec<Vector2<f64>> {
    let mut comps: Vec<_> = belief.components().iter().collect();
    comps.sort_by(|a, b| b.mass().total_cmp(&a.mass()));
    comps.iter().take(k).map(|c| to_vec2(c.gaussian.mean())).collect()
}

fn region_samples(region: &ReachRegion, rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector2<f64>> {
    (0..n)
        .map(|_| {
            let a = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let r = rng.random::<f64>().sqrt() * region.radius_toward(a);
            region.origin + Vector2::new(a.cos(), a.sin()) * r
        })
        .collect()
}

fn region_grid(region: &ReachRegion) -> Vec<Vector2<f64>> {
    let mut pts = vec![region.origin];
    for i in 1..=10 {
        for k in 0..36 {
            let a = k as f64 * std::f64::consts::PI / 18.0;
            let r = region.radius_toward(a) * i as f64 / 10.0;
            pts.push(region.origin + Vector2::new(a.cos(), a.sin()) * r);
        }
    }
    pts
}

fn separated(p: &Vector2<f64>, locked: &[Vector2<f64>], m: f64) -> bool {
    locked.iter().all(|l| (p - l).norm() >= m)
}

fn free_project(
    p: &Vector2<f64>,
    region: &ReachRegion,
    locked: &[Vector2<f64>],
    m: f64,
) -> Option<Vector2<f64>> {
    let mut q = region.retract(p);
    for _ in 0..20 {
        let mut moved = false;
        for l in locked {
            let d = q - l;
            let n = d.norm();
            if n < m {
                let dir = if n > 1e-9 {
                    d / n
                } else {
                    let o = q - region.origin;
                    if o.norm() > 1e-9 { o.normalize() } else { Vector2::new(1.0, 0.0) }
                };
                q = l + dir * m * (1.0 + 1e-9);
                moved = true;
            }
        }
        q = region.retract(&q);
        if !moved {
            break;
        }
    }
    (region.contains(&q) && separated(&q, locked, m)).then_some(q)
}

fn heading_to(robot: &AgentState, p: &Vector2<f64>) -> f64 {
    let d = p - robot.position();
    if d.norm() > 1e-6 { d.y.atan2(d.x) } else { robot.pose.theta }
}

struct Assigned {
    constraint: TrackConstraint,
    point: Vector2<f64>,
}

fn place_assigned(
    robot: &AgentState,
    track: &KalmanTrack,
    sensor: &SensorModel,
    field: &DetectionField,
    belief: &GaussianMixture,
    params: &NbvParams,
) -> Result<Assigned> {
    let ell = feasibility_ellipsoid(sensor, &from_mat2(&robot.pose_cov), track, params.alpha)?;
    let region = ReachRegion::new(&robot.pose, &robot.bounds, params.horizon);
    let track_pos = to_vec2(track.position().mean());
    let infeasible = |ellipsoid: FeasibilityEllipsoid| Assigned {
        constraint: TrackConstraint { track_id: track.id, robot_id: robot.id, ellipsoid, reachable: false },
        point: region.retract(&track_pos),
    };
    if !ell.feasible {
        return Ok(infeasible(ell));
    }
    // Viewpoints stay a hair inside so the bound survives rounding.
    let inner = FeasibilityEllipsoid { radius_sq: ell.radius_sq * (1.0 - BOUNDARY_MARGIN), ..ell.clone() };
    let inside = |p: &Vector2<f64>| -> Option<Vector2<f64>> {
        let q = to_vec2(&inner.project(&DVector::from_column_slice(p.as_slice()))?);
        region.contains(&q).then_some(q)
    };
    let here = robot.position();
    let start = inside(&here).or_else(|| {
        let mut best: Option<Vector2<f64>> = None;
        for i in 0..=10 {
            for k in 0..72 {
                let a = k as f64 * std::f64::consts::PI / 36.0;
                let u = DVector::from_column_slice(&[a.cos(), a.sin()]) * (i as f64 / 10.0);
                let q = to_vec2(&inner.from_unit(&u));
                if region.contains(&q)
                    && best.is_none_or(|b| (q - here).norm() < (b - here).norm())
                {
                    best = Some(q);
                }
            }
        }
        best
    });
    let Some(start) = start else {
        return Ok(infeasible(ell));
    };
    let mut starts = vec![start];
    starts.extend(mode_starts(belief, params.top_k));
    let (point, _) = best_of(field, &starts, &inside).unwrap_or((start, 0.0));
    Ok(Assigned {
        constraint: TrackConstraint { track_id: track.id, robot_id: robot.id, ellipsoid: ell, reachable: true },
        point,
    })
}

/// Places every robot's terminal viewpoint for the coming horizon.
///
/// `tracks` must already be predicted to the horizon. `belief` is the
/// untracked-object belief; it is normalized internally.
pub fn solve_nbv(
    belief: &GaussianMixture,
    robots: &[AgentState],
    tracks: &[KalmanTrack],
    assignment: &AssignmentResult,
    sensor: &SensorModel,
    params: &NbvParams,
    rng_seed: u64,
) -> Result<NbvSolution> {
    if !(params.alpha > 0.0 && params.alpha < 1.0) || !(params.separation >= 0.0) || !(params.horizon > 0.0) {
        return Err(Error::InvalidArgument("invalid NBV parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let fields: Vec<DetectionField> = robots
        .iter()
        .map(|r| DetectionField::from_belief(sensor, &r.pose_cov, belief))
        .collect::<Result<_>>()?;
    let index: BTreeMap<usize, usize> = robots.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    let mut points: BTreeMap<usize, Vector2<f64>> = BTreeMap::new();
    let mut constraints = Vec::new();

    for (&tid, &rid) in &assignment.pairs {
        let track = tracks
            .iter()
            .find(|t| t.id == tid)
            .ok_or_else(|| Error::InvalidArgument(format!("assignment names unknown track {tid}")))?;
        let &ri = index
            .get(&rid)
            .ok_or_else(|| Error::InvalidArgument(format!("assignment names unknown robot {rid}")))?;
        let a = place_assigned(&robots[ri], track, sensor, &fields[ri], belief, params)?;
        points.insert(rid, a.point);
        constraints.push(a.constraint);
    }

    let free: Vec<usize> = robots
        .iter()
        .enumerate()
        .filter(|(_, r)| !assignment.pairs.values().any(|&x| x == r.id))
        .map(|(i, _)| i)
        .collect();
    let regions: Vec<ReachRegion> = robots
        .iter()
        .map(|r| ReachRegion::new(&r.pose, &r.bounds, params.horizon))
        .collect();
    let samples: Vec<Vec<Vector2<f64>>> =
        regions.iter().map(|reg| region_samples(reg, &mut rng, params.random_starts)).collect();
    let modes = mode_starts(belief, params.top_k);
    let m = params.separation;

    let mut remaining = free.clone();
    let mut locked: Vec<Vector2<f64>> = Vec::new();
    let mut greedy: BTreeMap<usize, Vector2<f64>> = BTreeMap::new();
    while !remaining.is_empty() {
        let mut round: Option<(usize, Vector2<f64>, f64)> = None;
        for &i in &remaining {
            let region = &regions[i];
            let project = |p: &Vector2<f64>| free_project(p, region, &locked, m);
            let mut starts = vec![robots[i].position()];
            starts.extend(modes.iter().copied());
            starts.extend(samples[i].iter().copied());
            let best = best_of(&fields[i], &starts, &project).or_else(|| {
                region_grid(region)
                    .into_iter()
                    .filter(|p| region.contains(p) && separated(p, &locked, m))
                    .map(|p| (p, gain(&fields[i], &p)))
                    .fold(None, |acc: Option<(Vector2<f64>, f64)>, c| match acc {
                        Some(a) if a.1 >= c.1 => Some(a),
                        _ => Some(c),
                    })
            });
            let (p, f) = best.unwrap_or((robots[i].position(), f64::NEG_INFINITY));
            if round.is_none_or(|(_, _, bf)| f > bf + 1e-12) {
                round = Some((i, p, f));
            }
        }
        let (i, p, f) = round.expect("remaining is non-empty");
        if f == f64::NEG_INFINITY {
            log::warn!("robot {} has no separated viewpoint; holding position", robots[i].id);
        }
        greedy.insert(i, p);
        locked.push(p);
        remaining.retain(|&j| j != i);
    }

    let total = |placement: &BTreeMap<usize, Vector2<f64>>| -> f64 {
        placement.iter().map(|(&i, p)| gain(&fields[i], p)).sum()
    };
    let stay: BTreeMap<usize, Vector2<f64>> = free.iter().map(|&i| (i, robots[i].position())).collect();
    let stay_ok = stay.iter().all(|(&i, p)| {
        stay.iter().all(|(&j, q)| i == j || (p - q).norm() >= m)
    });
    let chosen = if stay_ok && total(&stay) > total(&greedy) { stay } else { greedy };
    for (i, p) in chosen {
        points.insert(robots[i].id, p);
    }

    let mut viewpoints = BTreeMap::new();
    let mut objective_value = 0.0;
    for (&rid, p) in &points {
        let ri = index[&rid];
        objective_value += gain(&fields[ri], p);
        viewpoints.insert(rid, Viewpoint { position: *p, heading: heading_to(&robots[ri], p) });
    }
    let mut separation_violations = Vec::new();
    let ids: Vec<usize> = points.keys().copied().collect();
    for (a, &i) in ids.iter().enumerate() {
        for &j in &ids[a + 1..] {
            let tracker = assignment.track_of(i).is_some() || assignment.track_of(j).is_some();
            if tracker && (points[&i] - points[&j]).norm() < m {
                separation_violations.push((i, j));
            }
        }
    }
    if !separation_violations.is_empty() {
        log::debug!("tracker viewpoints within separation: {separation_violations:?}");
    }
    let feasible = constraints.iter().all(|c| c.satisfiable());
    Ok(NbvSolution {
        viewpoints,
        assignment: assignment.clone(),
        objective_value,
        feasible,
        constraints,
        separation_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{ControlBounds, UnicycleState};
    use crate::gaussmix::{Gaussian, WeightedGaussian};
    use crate::tracker::LtiModel;
    use nalgebra::DMatrix;

    fn robot(id: usize, x: f64, y: f64) -> AgentState {
        AgentState::new(id, UnicycleState::new(x, y, 0.0), ControlBounds::new(2.0, 3.0).unwrap())
    }

    fn peak(x: f64, y: f64, var: f64) -> GaussianMixture {
        GaussianMixture::single(1.0, Gaussian::isotropic(&[x, y], var).unwrap()).unwrap()
    }

    #[test]
    fn default_separation_is_two_metres_for_default_sensor() {
        let s = SensorModel::isotropic(0.5, 2).unwrap();
        assert!((default_separation(&s) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn free_robot_climbs_to_peak() {
        let s = SensorModel::isotropic(0.5, 2).unwrap();
        let robots = [robot(0, 0.0, 0.0)];
        let sol = solve_nbv(
            &peak(1.5, 0.5, 0.3),
            &robots,
            &[],
            &AssignmentResult::all_explore(&robots),
            &s,
            &NbvParams::new(0.45, 2.0, 2.0),
            1,
        )
        .unwrap();
        let v = sol.viewpoints[&0].position;
        assert!((v - Vector2::new(1.5, 0.5)).norm() < 0.1, "{v:?}");
        assert!(sol.feasible);
    }

    #[test]
    fn assigned_robot_on_flat_belief_goes_to_closest_ellipsoid_point() {
        let s = SensorModel::isotropic(0.5, 2).unwrap();
        let robots = [robot(0, 0.0, 0.0)];
        let t = KalmanTrack::new(
            3,
            DVector::from_column_slice(&[1.5, 0.0, 0.0, 0.0]),
            DMatrix::identity(4, 4) * 0.01,
            LtiModel::default_planar(),
            0.0,
        )
        .unwrap();
        let mut a = AssignmentResult::default();
        a.pairs.insert(3, 0);
        let sol = solve_nbv(&GaussianMixture::empty(), &robots, &[t.clone()], &a, &s, &NbvParams::new(0.45, 2.0, 2.0), 0)
            .unwrap();
        let c = &sol.constraints[0];
        let want = to_vec2(&c.ellipsoid.project(&DVector::zeros(2)).unwrap());
        assert!((sol.viewpoints[&0].position - want).norm() < 1e-5);
        let p = s
            .detect_prob_gaussian(&DVector::from_column_slice(want.as_slice()), &DMatrix::zeros(2, 2), &t.position())
            .unwrap();
        assert!(p >= 0.55 - 1e-9);
    }

    #[test]
    fn infeasible_track_flags_solution() {
        let s = SensorModel::isotropic(0.5, 2).unwrap();
        let robots = [robot(0, 0.0, 0.0), robot(1, 5.0, 0.0)];
        let t = KalmanTrack::new(
            3,
            DVector::from_column_slice(&[1.0, 0.0, 0.0, 0.0]),
            DMatrix::identity(4, 4) * 2.0,
            LtiModel::default_planar(),
            0.0,
        )
        .unwrap();
        let mut a = AssignmentResult::default();
        a.pairs.insert(3, 0);
        a.unassigned_robots.insert(1);
        let sol = solve_nbv(&peak(5.0, 1.0, 0.5), &robots, &[t], &a, &s, &NbvParams::new(0.45, 2.0, 2.0), 0).unwrap();
        assert!(!sol.feasible);
        assert_eq!(sol.infeasible_tracks(), vec![3]);
        assert!(sol.viewpoints.contains_key(&1));
    }

    #[test]
    fn unknown_track_in_assignment_rejected() {
        let s = SensorModel::isotropic(0.5, 2).unwrap();
        let robots = [robot(0, 0.0, 0.0)];
        let mut a = AssignmentResult::default();
        a.pairs.insert(9, 0);
        let r = solve_nbv(&GaussianMixture::empty(), &robots, &[], &a, &s, &NbvParams::new(0.45, 2.0, 2.0), 0);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn two_explorers_keep_separation() {
        let s = SensorModel::isotropic(0.5, 2).unwrap();
        let robots = [robot(0, 0.0, 0.0), robot(1, 3.0, 0.0)];
        let belief = GaussianMixture::new(vec![WeightedGaussian::from_mass(
            1.0,
            Gaussian::isotropic(&[1.5, 1.0], 1.0).unwrap(),
        )])
        .unwrap();
        let sol = solve_nbv(&belief, &robots, &[], &AssignmentResult::all_explore(&robots), &s, &NbvParams::new(0.45, 2.0, 2.0), 5)
            .unwrap();
        let d = (sol.viewpoints[&0].position - sol.viewpoints[&1].position).norm();
        assert!(d >= 2.0 - 1e-9, "{d}");
    }
}
