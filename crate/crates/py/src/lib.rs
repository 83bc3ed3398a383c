//! Python bindings: `import pyjetplan`.

use jetplan::agent::{AgentState, ControlBounds, UnicycleState};
use jetplan::gaussmix::{self, WeightedGaussian};
use jetplan::jet::{self, Detection, InformationState, Observation};
use jetplan::planner_high::{self, feasibility_ellipsoid};
use jetplan::planner_low::{self, PathObjective, PathOptions};
use jetplan::sensor;
use jetplan::sim::{self, ScenarioConfig};
use jetplan::tracker::{self, LtiModel, StudyConfig};
use nalgebra::{DMatrix, DVector, Vector2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[pyclass(name = "Gaussian", from_py_object)]
#[derive(Clone)]
struct PyGaussian(gaussmix::Gaussian);

#[pymethods]
impl PyGaussian {
    #[new]
    fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<Self> {
        gaussmix::Gaussian::new(vector(&mean), matrix(&cov)?).map(Self).map_err(err)
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.0.mean().iter().copied().collect()
    }

    #[getter]
    fn cov(&self) -> Vec<Vec<f64>> {
        rows(self.0.cov())
    }

    fn pdf(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.pdf(&vector(&x)).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Gaussian(mean={:?})", self.mean())
    }
}

/// Mixture weighted by peak height, so `density_at(mean)` of a lone
/// component equals its weight.
#[pyclass(name = "GaussianMixture", from_py_object)]
#[derive(Clone)]
struct PyMixture(gaussmix::GaussianMixture);

#[pymethods]
impl PyMixture {
    #[new]
    fn new(components: Vec<(f64, PyGaussian)>) -> PyResult<Self> {
        let cs = components.into_iter().map(|(w, g)| WeightedGaussian::new(w, g.0)).collect();
        gaussmix::GaussianMixture::new(cs).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn components(&self) -> Vec<(f64, PyGaussian)> {
        self.0.components().iter().map(|c| (c.weight, PyGaussian(c.gaussian.clone()))).collect()
    }

    fn density_at(&self, point: Vec<f64>) -> PyResult<f64> {
        self.0.density_at(&vector(&point)).map_err(err)
    }

    fn mass(&self) -> f64 {
        self.0.mass()
    }

    fn normalized(&self) -> PyResult<Self> {
        self.0.normalized().map(Self).map_err(err)
    }

    #[pyo3(signature = (n, seed=0))]
    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        self.0.sample(n, seed).into_iter().map(|v| v.iter().copied().collect()).collect()
    }
}

/// Removes the probability of a missed detection from `prior` and refits
/// the result as a positive mixture.
#[pyfunction]
#[pyo3(signature = (prior, miss_kernel, max_components=16, samples=800, seed=0))]
fn negative_update(prior: &PyMixture, miss_kernel: &PyMixture, max_components: usize, samples: usize, seed: u64) -> PyResult<PyMixture> {
    let signed = gaussmix::negative_update(&prior.0, &miss_kernel.0).map_err(err)?;
    gaussmix::refit_mixture(&signed, max_components, samples, seed).map(PyMixture).map_err(err)
}

#[pyclass(name = "SensorModel", from_py_object)]
#[derive(Clone)]
struct PySensor(sensor::SensorModel);

#[pymethods]
impl PySensor {
    /// Single Gaussian footprint centred on the robot, peaking at one.
    #[staticmethod]
    fn isotropic(sigma: f64) -> PyResult<Self> {
        sensor::SensorModel::isotropic(sigma, 2).map(Self).map_err(err)
    }

    /// Mixture of `(zeta, offset, cov)` footprints rescaled to peak at one.
    #[staticmethod]
    fn normalized(mixands: Vec<(f64, Vec<f64>, Vec<Vec<f64>>)>) -> PyResult<Self> {
        let ms = mixands
            .into_iter()
            .map(|(z, o, c)| sensor::SensorMixand::new(z, vector(&o), matrix(&c)?).map_err(err))
            .collect::<PyResult<Vec<_>>>()?;
        sensor::SensorModel::normalized(ms).map(Self).map_err(err)
    }

    fn kernel(&self, robot: Vec<f64>, object: Vec<f64>) -> PyResult<f64> {
        self.0.kernel(&vector(&robot), &vector(&object)).map_err(err)
    }

    fn detect_prob_gaussian(&self, robot: Vec<f64>, robot_cov: Vec<Vec<f64>>, object: &PyGaussian) -> PyResult<f64> {
        self.0.detect_prob_gaussian(&vector(&robot), &matrix(&robot_cov)?, &object.0).map_err(err)
    }

    fn detect_prob_mixture(&self, robot: Vec<f64>, robot_cov: Vec<Vec<f64>>, belief: &PyMixture) -> PyResult<f64> {
        self.0.detect_prob_mixture(&vector(&robot), &matrix(&robot_cov)?, &belief.0).map_err(err)
    }

    fn miss_kernel(&self, robot: Vec<f64>, robot_cov: Vec<Vec<f64>>) -> PyResult<PyMixture> {
        self.0.miss_kernel_in_object_space(&vector(&robot), &matrix(&robot_cov)?).map(PyMixture).map_err(err)
    }
}

/// Constant-velocity Kalman track with state `[x, y, vx, vy]`.
#[pyclass(name = "KalmanTrack", from_py_object)]
#[derive(Clone)]
struct PyTrack(tracker::KalmanTrack);

#[pymethods]
impl PyTrack {
    #[new]
    #[pyo3(signature = (mean, cov, dt=0.1, q=0.01, r=0.01, id=0))]
    fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>, dt: f64, q: f64, r: f64, id: u64) -> PyResult<Self> {
        let model = LtiModel::constant_velocity(dt, q, r).map_err(err)?;
        tracker::KalmanTrack::new(id, vector(&mean), matrix(&cov)?, model, 0.0).map(Self).map_err(err)
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.0.mean.iter().copied().collect()
    }

    #[getter]
    fn cov(&self) -> Vec<Vec<f64>> {
        rows(&self.0.cov)
    }

    fn cov_norm(&self) -> f64 {
        self.0.cov_norm()
    }

    fn predict(&self, steps: usize) -> Self {
        Self(self.0.predict(steps))
    }

    fn update(&self, z: Vec<f64>) -> PyResult<Self> {
        self.0.update(&vector(&z)).map(Self).map_err(err)
    }

    /// Steady-state posterior covariance when detected every `steps` ticks.
    #[pyo3(signature = (steps=1))]
    fn riccati_fixed_point(&self, steps: usize) -> PyResult<Vec<Vec<f64>>> {
        let model = self.0.model.lifted(steps).map_err(err)?;
        tracker::riccati_fixed_point(&model).map(|p| rows(&p)).map_err(err)
    }
}

/// Norms of the track covariance after repeated horizons of intermittent
/// detection with probability `p`.
#[pyfunction]
#[pyo3(signature = (p, horizons=20, trials=10_000, seed=0))]
fn covariance_study<'py>(py: Python<'py>, p: f64, horizons: usize, trials: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let cfg = StudyConfig { horizons, trials, rng_seed: seed, ..StudyConfig::default() };
    let report = tracker::intermittent_covariance_study(&LtiModel::default_planar(), p, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("detect_prob", report.detect_prob)?;
    d.set_item("mean_norm", report.mean_norm)?;
    d.set_item("pmf_peak_fraction", report.pmf_peak_fraction)?;
    d.set_item("norms", report.norms)?;
    Ok(d)
}

/// Optimal row-to-column matching of a rectangular cost matrix with at
/// least as many columns as rows.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> Vec<usize> {
    planner_high::hungarian(&cost)
}

/// Convex region of robot positions that detect `track` with probability
/// at least `1 - alpha`. Returns `(feasible, center, shape, radius_sq)`.
#[pyfunction]
fn feasibility_region(
    sensor: &PySensor,
    robot_cov: Vec<Vec<f64>>,
    track: &PyTrack,
    alpha: f64,
) -> PyResult<(bool, Vec<f64>, Vec<Vec<f64>>, f64)> {
    let e = feasibility_ellipsoid(&sensor.0, &matrix(&robot_cov)?, &track.0, alpha).map_err(err)?;
    Ok((e.feasible, e.center.iter().copied().collect(), rows(&e.shape), e.radius_sq))
}

/// Optimized unicycle path from `start = (x, y, theta)` to `goal = (x, y)`
/// over `horizon` seconds. Knots are `(t, x, y, theta, v, omega)`.
#[pyfunction]
#[pyo3(signature = (start, goal, belief, sensor, v_max, omega_max, horizon=2.0))]
fn solve_path<'py>(
    py: Python<'py>,
    start: (f64, f64, f64),
    goal: (f64, f64),
    belief: &PyMixture,
    sensor: &PySensor,
    v_max: f64,
    omega_max: f64,
    horizon: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let bounds = ControlBounds::new(v_max, omega_max).map_err(err)?;
    let s = UnicycleState::new(start.0, start.1, start.2);
    let obj = PathObjective::new(belief.0.clone(), sensor.0.clone());
    let sol = planner_low::solve_path(&s, &Vector2::new(goal.0, goal.1), &obj, &bounds, horizon, &PathOptions::default())
        .map_err(err)?;
    let knots: Vec<(f64, f64, f64, f64, f64, f64)> = sol
        .trajectory
        .knots
        .iter()
        .map(|k| (k.t, k.state.x, k.state.y, k.state.theta, k.control.v, k.control.omega))
        .collect();
    let d = PyDict::new(py);
    d.set_item("knots", knots)?;
    d.set_item("objective", sol.objective)?;
    d.set_item("status", format!("{:?}", sol.status))?;
    d.set_item("max_defect", sol.max_defect)?;
    d.set_item("terminal_residual", sol.terminal_residual)?;
    Ok(d)
}

#[pyclass(name = "Scenario", from_py_object)]
#[derive(Clone)]
struct PyScenario(ScenarioConfig);

#[pymethods]
impl PyScenario {
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn replica(seed: u64) -> Self {
        Self(ScenarioConfig::replica(seed))
    }

    #[staticmethod]
    #[pyo3(signature = (v_max, seed=0))]
    fn single_robot(v_max: f64, seed: u64) -> Self {
        Self(ScenarioConfig::single_robot(v_max, seed))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(err)?;
        cfg.validate().map_err(err)?;
        Ok(Self(cfg))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.0).map_err(err)
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.0.duration
    }

    #[setter]
    fn set_duration(&mut self, d: f64) {
        self.0.duration = d;
    }

    /// Runs the closed loop and returns the full output log as JSON.
    fn run(&self, py: Python<'_>) -> PyResult<String> {
        let cfg = self.0.clone();
        let out = py.detach(move || sim::run_scenario(&cfg)).map_err(err)?;
        serde_json::to_string(&out).map_err(err)
    }
}

/// The receding-horizon planner driven by caller-supplied observations.
#[pyclass(name = "Planner")]
struct PyPlanner(InformationState);

#[pymethods]
impl PyPlanner {
    /// Planner initialised from what the robots of `scenario` know.
    #[new]
    fn new(scenario: &PyScenario) -> PyResult<Self> {
        sim::initial_information(&scenario.0).map(Self).map_err(err)
    }

    #[getter]
    fn time(&self) -> f64 {
        self.0.time()
    }

    fn belief(&self) -> PyMixture {
        PyMixture(self.0.untracked_belief.clone())
    }

    fn tracks(&self) -> Vec<PyTrack> {
        self.0.tracks.iter().cloned().map(PyTrack).collect()
    }

    /// One tick. `observations[i]` lists robot `i`'s detections as
    /// `(object, x, y)`. Returns `(controls, record_json)` where controls are
    /// `(v, omega)` per robot.
    fn step(&mut self, observations: Vec<Vec<(usize, f64, f64)>>) -> PyResult<(Vec<(f64, f64)>, String)> {
        let obs: Vec<Observation> = observations
            .into_iter()
            .map(|ds| Observation {
                detections: ds.into_iter().map(|(object, x, y)| Detection { object, position: Vector2::new(x, y) }).collect(),
            })
            .collect();
        let (controls, record) = jet::step(&mut self.0, &obs).map_err(err)?;
        let json = serde_json::to_string(&record).map_err(err)?;
        Ok((controls.iter().map(|u| (u.v, u.omega)).collect(), json))
    }

    /// Robot poses as `(x, y, theta)` after the controls of the last step.
    fn poses(&self) -> Vec<(f64, f64, f64)> {
        self.0.robots.iter().map(|r: &AgentState| (r.pose.x, r.pose.y, r.pose.theta)).collect()
    }
}

#[pymodule]
fn pyjetplan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGaussian>()?;
    m.add_class::<PyMixture>()?;
    m.add_class::<PySensor>()?;
    m.add_class::<PyTrack>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyPlanner>()?;
    m.add_function(wrap_pyfunction!(negative_update, m)?)?;
    m.add_function(wrap_pyfunction!(covariance_study, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(feasibility_region, m)?)?;
    m.add_function(wrap_pyfunction!(solve_path, m)?)?;
    Ok(())
}
