//! The joint exploration-and-tracking loop.
//!
//! [`step`] consumes one tick of observations, updates the tracks and the
//! shared untracked belief, re-solves the assignment and the viewpoints on
//! horizon boundaries or new discoveries, re-plans every robot's path and
//! returns the controls to apply over the next tick.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::agent::{unicycle_arc, AgentState, ControlInput};
use crate::error::{Error, Result};
use crate::gaussmix::{refit_mixture_with, Gaussian, GaussianMixture, RefitOptions, SignedMixture, WeightedGaussian};
use crate::linalg::wrap_angle;
use crate::planner_high::{
    default_separation, jensen_inner_bound, ReachRegion, solve_assignment, solve_assignment_relaxed, solve_nbv, AssignmentResult,
    NbvParams, NbvSolution,
};
use crate::planner_low::{solve_path, PathObjective, PathOptions, SolveStatus, TrackedKernel, Trajectory};
use crate::sensor::SensorModel;
use crate::tracker::{KalmanTrack, LtiModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JetParams {
    pub dt: f64,
    pub horizon: f64,
    pub alpha: f64,
    /// Minimum separation of exploring viewpoints; `None` derives it from
    /// the sensor footprint.
    pub separation: Option<f64>,
    pub n_knots: usize,
    pub seed: u64,
    /// Full-state covariance norm below which a pursued track is handed
    /// back to the planner.
    pub recovery_threshold: f64,
    /// Weight of tracked-object kernels in the path objective.
    pub tracked_weight: f64,
    /// Process-noise intensity and measurement variance of the track model.
    pub track_q: f64,
    pub track_r: f64,
    /// Speed bound used for the velocity prior of new tracks.
    pub object_speed: f64,
    /// Isotropic spread rate of the untracked belief, m²/s.
    pub belief_diffusion: f64,
    pub refit_components: usize,
    pub refit_samples: usize,
    pub prune_tol: f64,
}

impl Default for JetParams {
    fn default() -> Self {
        Self {
            dt: crate::tracker::DEFAULT_DT,
            horizon: 2.0,
            alpha: 0.45,
            separation: None,
            n_knots: 21,
            seed: 0,
            recovery_threshold: 0.1,
            tracked_weight: 1.0,
            track_q: crate::tracker::DEFAULT_Q,
            track_r: crate::tracker::DEFAULT_R,
            object_speed: 1.0,
            belief_diffusion: 0.02,
            refit_components: 16,
            refit_samples: 800,
            prune_tol: 1e-6,
        }
    }
}

impl JetParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        let k = self.horizon / self.dt;
        if (k - k.round()).abs() > 1e-9 || k.round() < 1.0 {
            return bad("horizon must be a positive multiple of dt");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.n_knots < 5 {
            return bad("n_knots must be at least 5");
        }
        if matches!(self.separation, Some(s) if !(s >= 0.0)) {
            return bad("separation must be non-negative");
        }
        if !(self.recovery_threshold > 0.0) || !(self.object_speed > 0.0) {
            return bad("recovery_threshold and object_speed must be positive");
        }
        if !(self.track_q > 0.0 && self.track_r > 0.0) {
            return bad("track noise must be positive");
        }
        if !(self.belief_diffusion >= 0.0) || self.refit_components == 0 || self.refit_samples == 0 {
            return bad("invalid belief maintenance settings");
        }
        Ok(())
    }

    pub fn ticks_per_horizon(&self) -> u64 {
        (self.horizon / self.dt).round() as u64
    }

    pub fn track_model(&self) -> Result<LtiModel> {
        LtiModel::constant_velocity(self.dt, self.track_q, self.track_r)
    }
}

/// Sensor return of one robot for one object at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Identity of the detected object.
    pub object: usize,
    pub position: Vector2<f64>,
}

/// Everything one robot reported at one instant; no detections means a miss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub detections: Vec<Detection>,
}

impl Observation {
    pub fn miss() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Exploring,
    Tracking(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub robot: usize,
    pub from: Role,
    pub to: Role,
}

/// Role changes between two assignments.
pub fn detect_switching_events(prev: &AssignmentResult, next: &AssignmentResult) -> Vec<SwitchEvent> {
    let robots: BTreeSet<usize> = [prev, next]
        .iter()
        .flat_map(|a| a.pairs.values().copied().chain(a.unassigned_robots.iter().copied()))
        .collect();
    let role = |a: &AssignmentResult, r: usize| a.track_of(r).map_or(Role::Exploring, Role::Tracking);
    robots
        .into_iter()
        .filter_map(|r| {
            let (from, to) = (role(prev, r), role(next, r));
            (from != to).then_some(SwitchEvent { robot: r, from, to })
        })
        .collect()
}

/// Robots that must switch to pure pursuit of the given tracks.
pub fn hybrid_fallback(state: &InformationState, infeasible: &[u64]) -> BTreeMap<usize, u64> {
    infeasible
        .iter()
        .filter_map(|&t| state.assignment.robot_for(t).map(|r| (r, t)))
        .collect()
}

/// Outcome of the tracking guarantee check for one assigned pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeCheck {
    pub track: u64,
    pub robot: usize,
    pub time: f64,
    /// Exact detection probability at the planned terminal position.
    pub probability: f64,
    pub satisfied: bool,
}

/// Planner state: everything the robots know, nothing about the truth.
#[derive(Debug, Clone)]
pub struct InformationState {
    pub tick: u64,
    pub robots: Vec<AgentState>,
    pub tracks: Vec<KalmanTrack>,
    pub untracked_belief: GaussianMixture,
    pub control_history: Vec<Vec<ControlInput>>,
    /// Tick of the current horizon start.
    pub anchor_tick: u64,
    pub sensor: SensorModel,
    pub params: JetParams,
    pub assignment: AssignmentResult,
    pub nbv: Option<NbvSolution>,
    /// Horizon end tick for the current viewpoints.
    pub goal_tick: u64,
    pub plans: BTreeMap<usize, Trajectory>,
    /// Robots in pure pursuit and the track each follows.
    pub pursuit: BTreeMap<usize, u64>,
    /// Track of each discovered object.
    pub track_objects: BTreeMap<usize, u64>,
    track_model: LtiModel,
}

impl InformationState {
    pub fn new(robots: Vec<AgentState>, prior: GaussianMixture, sensor: SensorModel, params: JetParams) -> Result<Self> {
        params.validate()?;
        if sensor.dim() != 2 {
            return Err(Error::Config("sensor must be planar".into()));
        }
        let ids: BTreeSet<usize> = robots.iter().map(|r| r.id).collect();
        if ids.len() != robots.len() {
            return Err(Error::Config("robot ids must be unique".into()));
        }
        let track_model = params.track_model()?;
        Ok(Self {
            tick: 0,
            control_history: vec![Vec::new(); robots.len()],
            assignment: AssignmentResult::all_explore(&robots),
            robots,
            tracks: Vec::new(),
            untracked_belief: prior,
            anchor_tick: 0,
            sensor,
            params,
            nbv: None,
            goal_tick: 0,
            plans: BTreeMap::new(),
            pursuit: BTreeMap::new(),
            track_objects: BTreeMap::new(),
            track_model,
        })
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.params.dt
    }

    pub fn track(&self, id: u64) -> Option<&KalmanTrack> {
        self.tracks.iter().find(|t| t.id == id)
    }

    /// Registers an object that is already tracked before the run starts.
    pub fn add_track(&mut self, object: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<u64> {
        if self.track_objects.contains_key(&object) {
            return Err(Error::InvalidArgument(format!("object {object} is already tracked")));
        }
        let id = self.tracks.iter().map(|t| t.id + 1).max().unwrap_or(0);
        self.tracks.push(KalmanTrack::new(id, mean, cov, self.track_model.clone(), self.time())?);
        self.track_objects.insert(object, id);
        Ok(id)
    }

    pub fn track_model(&self) -> &LtiModel {
        &self.track_model
    }

    pub fn role(&self, robot: usize) -> Role {
        self.assignment.track_of(robot).map_or(Role::Exploring, Role::Tracking)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub id: u64,
    pub object: usize,
    pub mean: Vec<f64>,
    pub position_cov: Vec<Vec<f64>>,
    pub cov_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSummary {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
    pub role: Role,
    pub pursuit: bool,
    pub solve_status: Option<SolveStatus>,
}

/// Per-tick log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: f64,
    pub robots: Vec<RobotSummary>,
    pub tracks: Vec<TrackSummary>,
    pub belief: GaussianMixture,
    pub belief_mass: f64,
    pub assignment: Vec<(u64, usize)>,
    pub replanned: bool,
    pub horizon_start: bool,
    pub viewpoints: Vec<(usize, [f64; 2])>,
    pub nbv_objective: Option<f64>,
    pub infeasible_tracks: Vec<u64>,
    pub switching: Vec<SwitchEvent>,
    pub guarantees: Vec<GuaranteeCheck>,
    pub new_tracks: Vec<u64>,
    pub warnings: Vec<String>,
}

fn tick_seed(base: u64, tick: u64, salt: u64) -> u64 {
    base ^ tick.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn apply_detections(state: &mut InformationState, observations: &[Observation]) -> Result<Vec<u64>> {
    let time = state.time();
    let mut born = Vec::new();
    for (robot, obs) in state.robots.iter().zip(observations) {
        for det in &obs.detections {
            let z = DVector::from_column_slice(det.position.as_slice());
            match state.track_objects.get(&det.object) {
                Some(&tid) => {
                    let t = state.tracks.iter_mut().find(|t| t.id == tid).expect("mapped track exists");
                    *t = t.update(&z)?;
                    t.last_update = time;
                }
                None => {
                    let id = state.tracks.iter().map(|t| t.id + 1).max().unwrap_or(0);
                    log::info!("robot {} discovered object {} at t={time:.2}", robot.id, det.object);
                    let track =
                        KalmanTrack::spawn(id, &z, state.track_model.clone(), state.params.object_speed, time)?;
                    state.tracks.push(track);
                    state.track_objects.insert(det.object, id);
                    born.push(id);
                }
            }
        }
    }
    Ok(born)
}

/// Negative information from every robot's footprint, then one refit.
fn apply_misses(state: &mut InformationState) -> Result<()> {
    if state.untracked_belief.is_empty() {
        return Ok(());
    }
    let mut signed = SignedMixture::from(&state.untracked_belief);
    for r in &state.robots {
        let pos = DVector::from_column_slice(r.position().as_slice());
        let cov = DMatrix::from_column_slice(2, 2, r.pose_cov.as_slice());
        let kernel = state.sensor.miss_kernel_in_object_space(&pos, &cov)?;
        signed = signed.multiply_complement(&kernel)?.prune(state.params.prune_tol);
    }
    let p = &state.params;
    let opts = RefitOptions::new(p.refit_components, p.refit_samples, tick_seed(p.seed, state.tick, 1));
    state.untracked_belief = refit_mixture_with(&signed, &opts)?;
    Ok(())
}

fn diffuse_belief(belief: &GaussianMixture, rate: f64, dt: f64) -> Result<GaussianMixture> {
    if rate == 0.0 || belief.is_empty() {
        return Ok(belief.clone());
    }
    let comps = belief
        .components()
        .iter()
        .map(|c| {
            let g = &c.gaussian;
            let cov = g.cov() + DMatrix::identity(g.dim(), g.dim()) * (rate * dt);
            let mass = c.mass();
            Ok(WeightedGaussian::from_mass(mass, Gaussian::new(g.mean().clone(), cov)?))
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::new(comps)
}

/// Assignment and viewpoints for the horizon ending at `state.goal_tick`.
fn replan_high(state: &mut InformationState, record: &mut StepRecord) -> Result<()> {
    let p = state.params.clone();
    let remaining_ticks = state.goal_tick - state.tick;
    let horizon = remaining_ticks as f64 * p.dt;
    let predicted: Vec<KalmanTrack> = state.tracks.iter().map(|t| t.predict(remaining_ticks as usize)).collect();
    let (assignment, unreachable) = match solve_assignment(&state.robots, &predicted, horizon) {
        Ok(a) => (a, Vec::new()),
        Err(Error::InfeasibleAssignment(msg)) => {
            log::debug!("strict assignment failed ({msg}); relaxing");
            solve_assignment_relaxed(&state.robots, &predicted, horizon)?
        }
        Err(e) => return Err(e),
    };
    record.switching = detect_switching_events(&state.assignment, &assignment);
    state.assignment = assignment;
    let separation = p.separation.unwrap_or_else(|| default_separation(&state.sensor));
    let nbv_params = NbvParams::new(p.alpha, separation, horizon);
    let nbv = solve_nbv(
        &state.untracked_belief,
        &state.robots,
        &predicted,
        &state.assignment,
        &state.sensor,
        &nbv_params,
        tick_seed(p.seed, state.tick, 2),
    )?;
    let mut infeasible: BTreeSet<u64> = nbv.infeasible_tracks().into_iter().collect();
    infeasible.extend(unreachable);
    let infeasible: Vec<u64> = infeasible.into_iter().collect();
    let modes = hybrid_fallback(state, &infeasible);
    // A robot follows at most one track; a re-assigned robot drops stale pursuit.
    state.pursuit.retain(|r, t| state.assignment.track_of(*r) == Some(*t));
    state.pursuit.extend(modes);
    for c in &nbv.constraints {
        if state.pursuit.contains_key(&c.robot_id) {
            continue;
        }
        let Some(vp) = nbv.viewpoints.get(&c.robot_id) else { continue };
        let track = predicted.iter().find(|t| t.id == c.track_id).expect("constraint track exists");
        let robot = state.robots.iter().find(|r| r.id == c.robot_id).expect("constraint robot exists");
        let x = DVector::from_column_slice(vp.position.as_slice());
        let cov = DMatrix::from_column_slice(2, 2, robot.pose_cov.as_slice());
        let satisfied = jensen_inner_bound(&state.sensor, &cov, track, p.alpha, &x)?;
        let probability = state.sensor.detect_prob_gaussian(&x, &cov, &track.position())?;
        if !satisfied {
            log::warn!("tracking guarantee not certified for track {} at t={:.2}", c.track_id, state.time());
        }
        record.guarantees.push(GuaranteeCheck {
            track: c.track_id,
            robot: c.robot_id,
            time: state.time(),
            probability,
            satisfied,
        });
    }
    record.infeasible_tracks = infeasible;
    record.nbv_objective = Some(nbv.objective_value);
    state.nbv = Some(nbv);
    Ok(())
}

fn pursuit_control(robot: &AgentState, target: &Vector2<f64>, dt: f64) -> ControlInput {
    let d = target - robot.position();
    let dist = d.norm();
    if dist < 1e-9 {
        return ControlInput::default();
    }
    let err = wrap_angle(d.y.atan2(d.x) - robot.pose.theta);
    let omega = (err / dt).clamp(-robot.bounds.omega_max, robot.bounds.omega_max);
    let v = if err.abs() > std::f64::consts::FRAC_PI_2 { 0.0 } else { (dist / dt).min(robot.bounds.v_max) * err.cos() };
    robot.bounds.clamp(ControlInput { v, omega })
}

/// Plans one robot's path to its viewpoint and returns its control.
fn plan_robot(state: &mut InformationState, index: usize) -> Result<(ControlInput, Option<SolveStatus>, Option<String>)> {
    let p = &state.params;
    let robot = &state.robots[index];
    let t = state.time();
    let remaining = state.goal_tick.saturating_sub(state.tick) as f64 * p.dt;
    let Some(vp) = state.nbv.as_ref().and_then(|n| n.viewpoints.get(&robot.id)) else {
        return Ok((ControlInput::default(), None, Some(format!("robot {} has no viewpoint", robot.id))));
    };
    let mut goal = vp.position;
    let reach = robot.bounds.v_max * remaining;
    let gap = (goal - robot.position()).norm();
    if gap > 0.999 * reach {
        goal = robot.position() + (goal - robot.position()) * (0.999 * reach / gap);
    }
    let robot_cov = robot.pose_cov;
    let tracked = state
        .tracks
        .iter()
        .map(|tr| TrackedKernel { track: tr.clone(), weight: p.tracked_weight })
        .collect();
    let mut obj =
        PathObjective::new(state.untracked_belief.clone(), state.sensor.clone()).with_tracks(tracked, t);
    obj.robot_cov = robot_cov;
    obj.model_dt = p.dt;
    // One knot per tick keeps the executed controls on the planned path.
    let remaining_ticks = state.goal_tick.saturating_sub(state.tick) as usize;
    let n_knots = (remaining_ticks + 1).clamp(5, p.n_knots.max(5));
    let opts = PathOptions {
        n_knots,
        t_start: t,
        warm_start: state.plans.get(&robot.id).cloned(),
        ..PathOptions::default()
    };
    let mut result = solve_path(&robot.pose, &goal, &obj, &robot.bounds, remaining, &opts);
    if result.is_err() {
        // Fall back to the nearest goal a turn-then-drive motion reaches.
        let region = ReachRegion::new(&robot.pose, &robot.bounds, remaining);
        let near = region.retract(&goal);
        if let Ok(sol) = solve_path(&robot.pose, &near, &obj, &robot.bounds, remaining, &opts) {
            goal = near;
            result = Ok(sol);
        }
    }
    match result {
        Ok(sol) => {
            let u = robot.bounds.clamp(sol.trajectory.control_at_clamped(t + 0.5 * p.dt));
            if sol.status == SolveStatus::IterationLimit {
                log::info!("robot {} path solve hit its iteration limit", robot.id);
            }
            state.plans.insert(robot.id, sol.trajectory);
            Ok((u, Some(sol.status), None))
        }
        Err(e) => {
            let u = pursuit_control(robot, &goal, p.dt);
            state.plans.remove(&robot.id);
            Ok((u, None, Some(format!("robot {} path solve failed, driving straight at the goal: {e}", robot.id))))
        }
    }
}

/// One tick of the joint exploration-and-tracking loop.
///
/// `observations[i]` is what robot `i` (by position in `state.robots`)
/// sensed at `state.time()`. Returns one control per robot, to be held for
/// `params.dt`, and advances the state to the next tick.
pub fn step(state: &mut InformationState, observations: &[Observation]) -> Result<(Vec<ControlInput>, StepRecord)> {
    if observations.len() != state.robots.len() {
        return Err(Error::InvalidArgument(format!(
            "{} observation lists for {} robots",
            observations.len(),
            state.robots.len()
        )));
    }
    let k = state.params.ticks_per_horizon();
    let mut record = StepRecord {
        time: state.time(),
        robots: Vec::new(),
        tracks: Vec::new(),
        belief: GaussianMixture::empty(),
        belief_mass: 0.0,
        assignment: Vec::new(),
        replanned: false,
        horizon_start: false,
        viewpoints: Vec::new(),
        nbv_objective: None,
        infeasible_tracks: Vec::new(),
        switching: Vec::new(),
        guarantees: Vec::new(),
        new_tracks: Vec::new(),
        warnings: Vec::new(),
    };

    // Belief updates.
    record.new_tracks = apply_detections(state, observations)?;
    apply_misses(state)?;
    let recovered: Vec<usize> = state
        .pursuit
        .iter()
        .filter(|(_, t)| state.track(**t).is_none_or(|tr| tr.cov_norm() < state.params.recovery_threshold))
        .map(|(r, _)| *r)
        .collect();
    for r in &recovered {
        state.pursuit.remove(r);
    }

    // High-level re-solve.
    let boundary = state.nbv.is_none() || state.tick >= state.goal_tick;
    if boundary {
        state.anchor_tick = state.tick;
        state.goal_tick = state.tick + k;
        record.horizon_start = true;
    }
    // A robot leaving pursuit needs a fresh viewpoint.
    if boundary || !record.new_tracks.is_empty() || !recovered.is_empty() {
        replan_high(state, &mut record)?;
        record.replanned = true;
    }

    // Low-level paths and controls.
    let mut controls = Vec::with_capacity(state.robots.len());
    let mut statuses = Vec::with_capacity(state.robots.len());
    for i in 0..state.robots.len() {
        let rid = state.robots[i].id;
        if let Some(&tid) = state.pursuit.get(&rid) {
            let track = state.track(tid).expect("pursued track exists").predict(1);
            let target = Vector2::new(track.mean[0], track.mean[1]);
            controls.push(pursuit_control(&state.robots[i], &target, state.params.dt));
            statuses.push(None);
            state.plans.remove(&rid);
            continue;
        }
        let (u, status, warn) = plan_robot(state, i)?;
        if let Some(w) = warn {
            log::warn!("{w}");
            record.warnings.push(w);
        }
        controls.push(u);
        statuses.push(status);
    }

    // Logging snapshot at the sensing instant.
    for ((r, u), status) in state.robots.iter().zip(&controls).zip(&statuses) {
        record.robots.push(RobotSummary {
            id: r.id,
            x: r.pose.x,
            y: r.pose.y,
            theta: r.pose.theta,
            v: u.v,
            omega: u.omega,
            role: state.role(r.id),
            pursuit: state.pursuit.contains_key(&r.id),
            solve_status: *status,
        });
    }
    let objects: BTreeMap<u64, usize> = state.track_objects.iter().map(|(o, t)| (*t, *o)).collect();
    record.tracks = state
        .tracks
        .iter()
        .map(|t| {
            let pos = t.position();
            TrackSummary {
                id: t.id,
                object: objects[&t.id],
                mean: t.mean.iter().copied().collect(),
                position_cov: crate::linalg::mat_to_rows(pos.cov()),
                cov_norm: t.cov_norm(),
            }
        })
        .collect();
    record.belief = state.untracked_belief.clone();
    record.belief_mass = state.untracked_belief.mass();
    record.assignment = state.assignment.pairs.iter().map(|(t, r)| (*t, *r)).collect();
    if let Some(n) = &state.nbv {
        record.viewpoints = n.viewpoints.iter().map(|(r, v)| (*r, [v.position.x, v.position.y])).collect();
    }

    // Advance the believed state by one tick.
    let dt = state.params.dt;
    for (i, (r, u)) in state.robots.iter_mut().zip(&controls).enumerate() {
        r.pose = unicycle_arc(&r.pose, u, dt);
        state.control_history[i].push(*u);
    }
    for t in &mut state.tracks {
        *t = t.predict(1);
    }
    state.untracked_belief = diffuse_belief(&state.untracked_belief, state.params.belief_diffusion, dt)?;
    state.tick += 1;
    Ok((controls, record))
}
