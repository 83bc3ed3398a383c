//! Ground-truth simulation around the planning loop.
//!
//! The truth lives here and only here: [`run_scenario`] turns true states
//! into [`Observation`]s, hands them to [`jet::step`] and applies the
//! returned controls to the true robots.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::{unicycle_arc, AgentState, ControlBounds, ControlInput, UnicycleState};
use crate::error::{Error, Result};
use crate::gaussmix::{Gaussian, GaussianMixture, WeightedGaussian};
use crate::jet::{self, Detection, GuaranteeCheck, InformationState, JetParams, Observation, StepRecord};
use crate::sensor::SensorModel;
use crate::tracker::{riccati_fixed_point, LtiModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Arena {
    pub fn square(side: f64) -> Self {
        Self { min: [0.0, 0.0], max: [side, side] }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotSpec {
    /// `[x, y, theta]`.
    pub pose: [f64; 3],
    pub v_max: f64,
    pub omega_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// `[x, y, vx, vy]`.
    pub state: [f64; 4],
    /// Acceleration noise intensity of the true motion.
    #[serde(default = "default_object_q")]
    pub q: f64,
    /// Tracked from the start with the steady-state covariance.
    #[serde(default)]
    pub known: bool,
    /// Track mean of a known object when it differs from the true state.
    #[serde(default)]
    pub belief: Option<[f64; 4]>,
}

fn default_object_q() -> f64 {
    crate::tracker::DEFAULT_Q
}

fn default_heatmap_resolution() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub arena: Arena,
    pub robots: Vec<RobotSpec>,
    pub objects: Vec<ObjectSpec>,
    pub sensor: SensorModel,
    #[serde(default)]
    pub params: JetParams,
    pub prior: GaussianMixture,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    /// Gaussian process noise on the true object motion.
    #[serde(default = "yes")]
    pub object_noise: bool,
    /// Per-tick position noise standard deviation on the true robots.
    #[serde(default)]
    pub robot_noise: f64,
    /// Ticks between belief heat-map snapshots; zero disables them.
    #[serde(default)]
    pub heatmap_every: u64,
    #[serde(default = "default_heatmap_resolution")]
    pub heatmap_resolution: f64,
}

fn yes() -> bool {
    true
}

/// A configuration problem tied to a top-level field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigIssue> {
        let issue = |field, message: String| Err(ConfigIssue { field, message });
        let a = &self.arena;
        if !(a.max[0] > a.min[0] && a.max[1] > a.min[1]) {
            return issue("arena", "max must exceed min on both axes".into());
        }
        if self.robots.is_empty() {
            return issue("robots", "at least one robot is required".into());
        }
        for (i, r) in self.robots.iter().enumerate() {
            if !a.contains(&r.pose) {
                return issue("robots", format!("robot {i} starts outside the arena"));
            }
            if ControlBounds::new(r.v_max, r.omega_max).is_err() {
                return issue("robots", format!("robot {i} needs positive v_max and omega_max"));
            }
        }
        if self.objects.len() > self.robots.len() {
            return issue(
                "objects",
                format!(
                    "{} objects but only {} robots; every object needs its own tracker (m <= n)",
                    self.objects.len(),
                    self.robots.len()
                ),
            );
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !a.contains(&o.state) {
                return issue("objects", format!("object {i} starts outside the arena"));
            }
            if !(o.q > 0.0) {
                return issue("objects", format!("object {i} needs a positive noise intensity"));
            }
        }
        if self.sensor.dim() != 2 {
            return issue("sensor", "sensor must be planar".into());
        }
        if let Err(e) = self.params.validate() {
            return issue("params", e.to_string());
        }
        if self.prior.dim().is_some_and(|d| d != 2) {
            return issue("prior", "prior must be planar".into());
        }
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return issue("duration", "duration must be a non-negative number of seconds".into());
        }
        if !(self.robot_noise >= 0.0) {
            return issue("robot_noise", "must be non-negative".into());
        }
        if !(self.heatmap_resolution > 0.0) {
            return issue("heatmap_resolution", "must be positive".into());
        }
        Ok(())
    }

    pub fn ticks(&self) -> u64 {
        (self.duration / self.params.dt).round() as u64
    }

    /// Five robots along the bottom edge of a 12 m square, three objects
    /// placed uniformly at least 3 m from every robot, near-uniform prior.
    pub fn replica(seed: u64) -> Self {
        let arena = Arena::square(12.0);
        let robots: Vec<RobotSpec> = (0..5)
            .map(|i| RobotSpec {
                pose: [2.0 + 2.0 * i as f64, 0.5, std::f64::consts::FRAC_PI_2],
                v_max: 1.5,
                omega_max: 2.0,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let objects = place_objects(&arena, &robots, 3, 3.0, 0.3, &mut rng);
        let params = JetParams { alpha: 0.45, horizon: 2.0, seed, ..JetParams::default() };
        Self {
            arena,
            robots,
            objects,
            sensor: SensorModel::isotropic(0.8, 2).expect("valid sensor"),
            params,
            prior: grid_prior(&arena, 4, None).expect("valid prior"),
            duration: 30.0,
            seed,
            object_noise: true,
            robot_noise: 0.0,
            heatmap_every: 0,
            heatmap_resolution: 0.25,
        }
    }

    /// One robot tracking one known object that crosses the arena, with a
    /// near-uniform prior peaked in the bottom-right corner.
    pub fn single_robot(v_max: f64, seed: u64) -> Self {
        let arena = Arena::square(12.0);
        let params = JetParams { alpha: 0.45, horizon: 2.0, seed, tracked_weight: 0.02, ..JetParams::default() };
        Self {
            arena,
            robots: vec![RobotSpec { pose: [2.0, 6.0, 0.0], v_max, omega_max: 2.0 }],
            objects: vec![ObjectSpec { state: [2.0, 6.5, 0.96, -0.28], q: crate::tracker::DEFAULT_Q, known: true, belief: None }],
            sensor: SensorModel::isotropic(0.6, 2).expect("valid sensor"),
            params,
            prior: grid_prior(&arena, 4, Some(([10.5, 1.5], 4.0))).expect("valid prior"),
            duration: 10.0,
            seed,
            object_noise: false,
            robot_noise: 0.0,
            heatmap_every: 0,
            heatmap_resolution: 0.25,
        }
    }

    /// A single horizon with one robot and one known object, plus an
    /// exploration lure that keeps the tracking constraint active. The true
    /// object state is drawn from the steady-state track belief, so detection
    /// at the horizon end is a fair sample of the planned probability.
    pub fn calibration(seed: u64) -> Self {
        use std::f64::consts::PI;
        let arena = Arena::square(40.0);
        let params = JetParams {
            alpha: 0.3,
            seed,
            belief_diffusion: 0.0,
            refit_components: 4,
            refit_samples: 200,
            ..JetParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA11_B8A7E);
        let heading: f64 = rng.random_range(-PI..PI);
        let speed = 0.3;
        let belief = [20.0, 20.0, speed * heading.cos(), speed * heading.sin()];
        let steady = params
            .track_model()
            .and_then(|m| riccati_fixed_point(&m))
            .expect("default track model is stable");
        let chol = steady.cholesky().expect("steady covariance is positive definite");
        let z = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let draw = DVector::from_column_slice(&belief) + chol.l() * z;
        let bearing: f64 = rng.random_range(-PI..PI);
        // Roughly facing the object, so the viewpoint is reachable in time.
        let facing = bearing + PI + rng.random_range(-0.5..0.5);
        let pose = [20.0 + bearing.cos(), 20.0 + bearing.sin(), facing];
        let lure = Gaussian::isotropic(&[20.0, 20.0], 400.0).expect("valid lure");
        Self {
            arena,
            robots: vec![RobotSpec { pose, v_max: 1.5, omega_max: 2.0 }],
            objects: vec![ObjectSpec {
                state: [draw[0], draw[1], draw[2], draw[3]],
                q: crate::tracker::DEFAULT_Q,
                known: true,
                belief: Some(belief),
            }],
            sensor: SensorModel::isotropic(0.6, 2).expect("valid sensor"),
            prior: GaussianMixture::single(1.0, lure).expect("valid prior"),
            // One tick past the horizon so the terminal detection is observed.
            duration: params.horizon + params.dt,
            params,
            seed,
            object_noise: true,
            robot_noise: 0.0,
            heatmap_every: 0,
            heatmap_resolution: 0.25,
        }
    }
}

/// `k x k` grid of equal broad components covering the arena, plus an
/// optional corner component `(center, relative weight)`.
pub fn grid_prior(arena: &Arena, k: usize, peak: Option<([f64; 2], f64)>) -> Result<GaussianMixture> {
    if k == 0 {
        return Err(Error::InvalidArgument("grid needs at least one cell".into()));
    }
    let (dx, dy) = (arena.width() / k as f64, arena.height() / k as f64);
    let var = (0.5 * dx.max(dy)).powi(2);
    let mut comps = Vec::new();
    for i in 0..k {
        for j in 0..k {
            let c = [arena.min[0] + (i as f64 + 0.5) * dx, arena.min[1] + (j as f64 + 0.5) * dy];
            comps.push(WeightedGaussian::from_mass(1.0, Gaussian::isotropic(&c, var)?));
        }
    }
    if let Some((c, w)) = peak {
        comps.push(WeightedGaussian::from_mass(w, Gaussian::isotropic(&c, 0.5 * var)?));
    }
    GaussianMixture::new(comps)?.normalized()
}

fn place_objects(
    arena: &Arena,
    robots: &[RobotSpec],
    m: usize,
    exclusion: f64,
    speed: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ObjectSpec> {
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let x = rng.random_range(arena.min[0] + 0.5..arena.max[0] - 0.5);
        let y = rng.random_range(arena.min[1] + 0.5..arena.max[1] - 0.5);
        let near = robots.iter().any(|r| (Vector2::new(x, y) - Vector2::new(r.pose[0], r.pose[1])).norm() < exclusion);
        if near {
            continue;
        }
        let heading: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        out.push(ObjectSpec {
            state: [x, y, speed * heading.cos(), speed * heading.sin()],
            q: crate::tracker::DEFAULT_Q,
            known: false,
            belief: None,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthState {
    pub robot_poses: Vec<UnicycleState>,
    pub object_states: Vec<DVector<f64>>,
    pub tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthNoise {
    pub objects: bool,
    pub robot_std: f64,
}

fn gaussian_draw<R: Rng + ?Sized>(cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let l = crate::linalg::clamp_eigenvalues(cov, 0.0);
    let chol = nalgebra::Cholesky::new(&l + DMatrix::identity(l.nrows(), l.nrows()) * 1e-15)
        .expect("clamped covariance is positive definite");
    let z = DVector::from_fn(cov.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    chol.l() * z
}

/// Mirrors a planar constant-velocity state back into the arena.
fn reflect(s: &mut DVector<f64>, arena: &Arena) {
    for i in 0..2 {
        let (lo, hi) = (arena.min[i], arena.max[i]);
        for _ in 0..4 {
            if s[i] < lo {
                s[i] = 2.0 * lo - s[i];
                s[i + 2] = s[i + 2].abs();
            } else if s[i] > hi {
                s[i] = 2.0 * hi - s[i];
                s[i + 2] = -s[i + 2].abs();
            }
        }
        s[i] = s[i].clamp(lo, hi);
    }
}

/// True motion over one tick: exact arcs for robots, a linear step with
/// optional process noise for objects, reflected at the arena walls.
pub fn advance_truth<R: Rng + ?Sized>(
    truth: &TruthState,
    controls: &[ControlInput],
    models: &[LtiModel],
    arena: &Arena,
    dt: f64,
    noise: TruthNoise,
    rng: &mut R,
) -> TruthState {
    let robot_poses = truth
        .robot_poses
        .iter()
        .zip(controls)
        .map(|(p, u)| {
            let mut n = unicycle_arc(p, u, dt);
            if noise.robot_std > 0.0 {
                n.x += noise.robot_std * rng.sample::<f64, _>(StandardNormal);
                n.y += noise.robot_std * rng.sample::<f64, _>(StandardNormal);
            }
            n
        })
        .collect();
    let object_states = truth
        .object_states
        .iter()
        .zip(models)
        .map(|(s, m)| {
            let mut next = &m.f * s;
            if noise.objects {
                next += gaussian_draw(&m.q, rng);
            }
            if next.len() == 4 {
                reflect(&mut next, arena);
            }
            next
        })
        .collect();
    TruthState { robot_poses, object_states, tick: truth.tick + 1 }
}

/// Bernoulli detections of every object by every robot at the true states.
/// Detected objects are reported with a noisy position measurement.
pub fn generate_observations<R: Rng + ?Sized>(
    truth: &TruthState,
    sensor: &SensorModel,
    measurement_var: f64,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    let sd = measurement_var.sqrt();
    truth
        .robot_poses
        .iter()
        .map(|pose| {
            let x = DVector::from_column_slice(&[pose.x, pose.y]);
            let mut obs = Observation::miss();
            for (j, s) in truth.object_states.iter().enumerate() {
                let a = DVector::from_column_slice(&[s[0], s[1]]);
                if sensor.sample_detection(&x, &a, rng)? {
                    let noise = Vector2::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    ) * sd;
                    obs.detections.push(Detection { object: j, position: Vector2::new(s[0], s[1]) + noise });
                }
            }
            Ok(obs)
        })
        .collect()
}

/// Belief density on a regular grid, row-major from the bottom row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefGrid {
    pub x_min: f64,
    pub y_min: f64,
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl BeliefGrid {
    pub fn from_belief(belief: &GaussianMixture, arena: &Arena, resolution: f64) -> Result<Self> {
        let nx = ((arena.width() / resolution).round() as usize).max(1);
        let ny = ((arena.height() / resolution).round() as usize).max(1);
        let mut values = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let p = DVector::from_column_slice(&[
                    arena.min[0] + (i as f64 + 0.5) * resolution,
                    arena.min[1] + (j as f64 + 0.5) * resolution,
                ]);
                values.push(if belief.is_empty() { 0.0 } else { belief.density_at(&p)? });
            }
        }
        Ok(Self { x_min: arena.min[0], y_min: arena.min[1], resolution, nx, ny, values })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "# x_min={} y_min={} resolution={} nx={} ny={}",
            self.x_min, self.y_min, self.resolution, self.nx, self.ny
        )?;
        for row in self.values.chunks(self.nx) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovSample {
    pub time: f64,
    pub object: usize,
    pub norm: f64,
}

/// Whether an assigned robot detected its object at the end of a horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalOutcome {
    pub time: f64,
    pub track: u64,
    pub robot: usize,
    pub detected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub discovery_times: Vec<Option<f64>>,
    pub guarantees: Vec<GuaranteeCheck>,
    /// Horizon starts at which at least one robot was in pursuit.
    pub fallback_horizons: Vec<f64>,
    pub horizons: usize,
    pub terminal_outcomes: Vec<TerminalOutcome>,
    pub cov_norms: Vec<CovSample>,
    pub objective: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

impl MetricsLog {
    pub fn all_discovered(&self) -> bool {
        self.discovery_times.iter().all(Option::is_some)
    }

    /// Guarantee checks made while no robot was in pursuit.
    pub fn nominal_guarantees(&self) -> impl Iterator<Item = &GuaranteeCheck> {
        self.guarantees
            .iter()
            .filter(|g| !self.fallback_horizons.iter().any(|t| (t - g.time).abs() < 1e-9))
    }

    pub fn terminal_detection_rate(&self) -> Option<f64> {
        if self.terminal_outcomes.is_empty() {
            return None;
        }
        let hits = self.terminal_outcomes.iter().filter(|o| o.detected).count();
        Some(hits as f64 / self.terminal_outcomes.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub time: f64,
    pub robots: Vec<[f64; 3]>,
    pub objects: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutput {
    pub metrics: MetricsLog,
    pub steps: Vec<StepRecord>,
    pub truth: Vec<TruthRecord>,
    pub heatmaps: Vec<(u64, BeliefGrid)>,
    /// Set when the run stopped early on a solver failure.
    pub error: Option<String>,
}

/// Options that trade log detail for speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub keep_steps: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { keep_steps: true }
    }
}

pub fn initial_truth(config: &ScenarioConfig) -> TruthState {
    TruthState {
        robot_poses: config.robots.iter().map(|r| UnicycleState::new(r.pose[0], r.pose[1], r.pose[2])).collect(),
        object_states: config.objects.iter().map(|o| DVector::from_column_slice(&o.state)).collect(),
        tick: 0,
    }
}

/// Planner state built from what the robots are allowed to know.
pub fn initial_information(config: &ScenarioConfig) -> Result<InformationState> {
    let robots = config
        .robots
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(AgentState::new(
                i,
                UnicycleState::new(r.pose[0], r.pose[1], r.pose[2]),
                ControlBounds::new(r.v_max, r.omega_max)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = InformationState::new(robots, config.prior.clone(), config.sensor.clone(), config.params.clone())?;
    let steady = riccati_fixed_point(info.track_model())?;
    for (j, o) in config.objects.iter().enumerate().filter(|(_, o)| o.known) {
        info.add_track(j, DVector::from_column_slice(&o.belief.unwrap_or(o.state)), steady.clone())?;
    }
    Ok(info)
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutput> {
    run_scenario_with(config, RunOptions::default())
}

/// Closed loop of sensing, planning and true motion for the configured
/// duration. Solver failures end the run early and are reported in
/// [`ScenarioOutput::error`] together with everything logged so far.
pub fn run_scenario_with(config: &ScenarioConfig, opts: RunOptions) -> Result<ScenarioOutput> {
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    let p = &config.params;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut truth = initial_truth(config);
    let mut info = initial_information(config)?;
    let models = config
        .objects
        .iter()
        .map(|o| LtiModel::constant_velocity(p.dt, o.q, p.track_r))
        .collect::<Result<Vec<_>>>()?;
    let noise = TruthNoise { objects: config.object_noise, robot_std: config.robot_noise };
    let mut metrics = MetricsLog {
        discovery_times: config.objects.iter().map(|o| o.known.then_some(0.0)).collect(),
        ..MetricsLog::default()
    };
    let mut out = ScenarioOutput { metrics: MetricsLog::default(), steps: Vec::new(), truth: Vec::new(), heatmaps: Vec::new(), error: None };

    for tick in 0..config.ticks() {
        let time = tick as f64 * p.dt;
        let obs = generate_observations(&truth, &config.sensor, p.track_r, &mut rng)?;
        for (j, t) in metrics.discovery_times.iter_mut().enumerate() {
            if t.is_none() && obs.iter().any(|o| o.detections.iter().any(|d| d.object == j)) {
                *t = Some(time);
            }
        }
        if info.nbv.is_some() && info.tick >= info.goal_tick {
            for (&track, &robot) in &info.assignment.pairs {
                if info.pursuit.contains_key(&robot) {
                    continue;
                }
                let Some((&object, _)) = info.track_objects.iter().find(|(_, t)| **t == track) else { continue };
                let ri = info.robots.iter().position(|r| r.id == robot).expect("assigned robot exists");
                let detected = obs[ri].detections.iter().any(|d| d.object == object);
                metrics.terminal_outcomes.push(TerminalOutcome { time, track, robot, detected });
            }
        }
        out.truth.push(TruthRecord {
            time,
            robots: truth.robot_poses.iter().map(|r| [r.x, r.y, r.theta]).collect(),
            objects: truth.object_states.iter().map(|s| [s[0], s[1]]).collect(),
        });

        let (controls, record) = match jet::step(&mut info, &obs) {
            Ok(v) => v,
            Err(e) => {
                out.error = Some(format!("t={time:.2}: {e}"));
                break;
            }
        };
        if record.horizon_start {
            metrics.horizons += 1;
            if !info.pursuit.is_empty() {
                metrics.fallback_horizons.push(time);
            }
        }
        metrics.guarantees.extend(record.guarantees.iter().copied());
        if let Some(v) = record.nbv_objective {
            metrics.objective.push((time, v));
        }
        metrics.warnings.extend(record.warnings.iter().map(|w| format!("t={time:.2}: {w}")));
        for t in &record.tracks {
            metrics.cov_norms.push(CovSample { time, object: t.object, norm: t.cov_norm });
        }
        if config.heatmap_every > 0 && tick % config.heatmap_every == 0 {
            out.heatmaps.push((tick, BeliefGrid::from_belief(&info.untracked_belief, &config.arena, config.heatmap_resolution)?));
        }
        if opts.keep_steps {
            out.steps.push(record);
        }
        truth = advance_truth(&truth, &controls, &models, &config.arena, p.dt, noise, &mut rng);
    }
    out.metrics = metrics;
    Ok(out)
}

/// Realized path length and largest distance from the object's realized
/// path, taken from the truth log of a single-robot run.
pub fn path_metrics(truth: &[TruthRecord], robot: usize, object: usize) -> (f64, f64) {
    let path: Vec<Vector2<f64>> = truth.iter().map(|r| Vector2::new(r.robots[robot][0], r.robots[robot][1])).collect();
    let target: Vec<Vector2<f64>> = truth.iter().map(|r| Vector2::new(r.objects[object][0], r.objects[object][1])).collect();
    let length = path.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let dist_to_polyline = |p: &Vector2<f64>| {
        if target.len() == 1 {
            return (p - target[0]).norm();
        }
        target
            .windows(2)
            .map(|w| {
                let d = w[1] - w[0];
                let s = if d.norm_squared() > 0.0 { ((p - w[0]).dot(&d) / d.norm_squared()).clamp(0.0, 1.0) } else { 0.0 };
                (p - (w[0] + d * s)).norm()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let lateral = path.iter().map(dist_to_polyline).fold(0.0, f64::max);
    (length, lateral)
}
