//! End-to-end acceptance checks. Runs as a plain binary so that every
//! criterion prints its own PASS/FAIL line, even under captured output.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use jetplan::agent::{ControlBounds, UnicycleState};
use jetplan::gaussmix::{Gaussian, GaussianMixture, WeightedGaussian};
use jetplan::planner_high::{feasibility_ellipsoid, hungarian, jensen_inner_bound};
use jetplan::planner_low::{
    objective_along_path, solve_path, PathObjective, PathOptions, PathSolution, Transcription,
};
use jetplan::sensor::{SensorMixand, SensorModel};
use jetplan::sim::{run_scenario_with, RunOptions, ScenarioConfig};
use jetplan::tracker::{intermittent_covariance_study, riccati_fixed_point, KalmanTrack, LtiModel, StudyConfig};
use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg.into()) }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_spd(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> DMatrix<f64> {
    let a = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let r = DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()]);
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![rng.random_range(lo..hi), rng.random_range(lo..hi)]));
    let m = &r * d * r.transpose();
    (&m + m.transpose()) * 0.5
}

fn draw(mean: &DVector<f64>, chol: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| normal(rng));
    mean + chol * z
}

fn random_sensor(rng: &mut ChaCha8Rng, n: usize) -> SensorModel {
    let mixands = (0..n)
        .map(|_| {
            let offset = DVector::from_vec(vec![rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)]);
            SensorMixand::new(rng.random_range(0.1..0.9) / n as f64, offset, random_spd(rng, 0.1, 0.6)).unwrap()
        })
        .collect();
    SensorModel::normalized(mixands).unwrap()
}

fn track(mean: [f64; 2], pos_cov: &DMatrix<f64>) -> KalmanTrack {
    let mut cov = DMatrix::identity(4, 4) * 0.01;
    cov.view_mut((0, 0), (2, 2)).copy_from(pos_cov);
    KalmanTrack::new(0, DVector::from_vec(vec![mean[0], mean[1], 0.0, 0.0]), cov, LtiModel::default_planar(), 0.0)
        .unwrap()
}

fn detection_kernel_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = 1_000_000;
    let mut worst: f64 = 0.0;
    for cfg in 0..20 {
        let sensor = random_sensor(&mut rng, 1 + cfg % 3);
        let robot = DVector::from_vec(vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
        let robot_cov = random_spd(&mut rng, 0.01, 0.2);
        let comps: Vec<WeightedGaussian> = (0..1 + cfg % 3)
            .map(|_| {
                let m = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
                let g = Gaussian::new(DVector::from_column_slice(&m), random_spd(&mut rng, 0.02, 0.3)).unwrap();
                WeightedGaussian::from_mass(rng.random_range(0.2..1.0), g)
            })
            .collect();
        let mixture = GaussianMixture::new(comps).unwrap();
        let first = mixture.components()[0].gaussian.clone();

        let rc = robot_cov.clone().cholesky().unwrap().l();
        let mc = |obj: &dyn Fn(&mut ChaCha8Rng) -> DVector<f64>, rng: &mut ChaCha8Rng| {
            let mut sum = 0.0;
            for _ in 0..samples {
                let r = draw(&robot, &rc, rng);
                sum += sensor.kernel(&r, &obj(rng)).unwrap();
            }
            sum / samples as f64
        };
        let fc = first.cov().clone().cholesky().unwrap().l();
        let mc_gauss = mc(&|rng| draw(first.mean(), &fc, rng), &mut rng);
        let exact_gauss = sensor.detect_prob_gaussian(&robot, &robot_cov, &first).unwrap();

        let fractions = mixture.mass_fractions();
        let chols: Vec<DMatrix<f64>> =
            mixture.components().iter().map(|c| c.gaussian.cov().clone().cholesky().unwrap().l()).collect();
        let mc_mix = mc(
            &|rng| {
                let mut u: f64 = rng.random();
                let mut k = 0;
                while k + 1 < fractions.len() && u >= fractions[k] {
                    u -= fractions[k];
                    k += 1;
                }
                draw(mixture.components()[k].gaussian.mean(), &chols[k], rng)
            },
            &mut rng,
        );
        let exact_mix = sensor.detect_prob_mixture(&robot, &robot_cov, &mixture).unwrap();
        for (mc, exact) in [(mc_gauss, exact_gauss), (mc_mix, exact_mix)] {
            let rel = (mc - exact).abs() / exact;
            worst = worst.max(rel);
            check(rel < 0.01, format!("config {cfg}: exact {exact:.5} vs Monte-Carlo {mc:.5}"))?;
        }
    }
    check(start.elapsed() < Duration::from_secs(120), "oracle slower than two minutes")?;
    Ok(format!("worst relative error {worst:.2e}"))
}

fn ellipsoid_soundness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut setups = 0;
    let mut min_margin = f64::INFINITY;
    while setups < 100 {
        let sensor = random_sensor(&mut rng, 1);
        let alpha = rng.random_range(0.05..0.7);
        let robot_cov = random_spd(&mut rng, 0.001, 0.05);
        let tr = track([rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)], &random_spd(&mut rng, 0.001, 0.1));
        let ell = feasibility_ellipsoid(&sensor, &robot_cov, &tr, alpha).unwrap();
        if !(ell.radius_sq > 0.0) {
            continue;
        }
        setups += 1;
        for _ in 0..1000 {
            let x = ell.sample_interior(&mut rng);
            let p = sensor.detect_prob_gaussian(&x, &robot_cov, &tr.position()).unwrap();
            min_margin = min_margin.min(p - (1.0 - alpha));
            check(p >= 1.0 - alpha - 1e-9, format!("setup {setups}: p {p} below {}", 1.0 - alpha))?;
        }
    }
    check(start.elapsed() < Duration::from_secs(60), "soundness check slower than a minute")?;
    Ok(format!("100 setups, smallest margin {min_margin:.3e}"))
}

fn jensen_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut certified, mut false_pos) = (0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(2..5);
        let mixands = (0..n)
            .map(|_| {
                let offset = DVector::from_vec(vec![rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)]);
                SensorMixand::new(rng.random_range(0.3..1.0), offset, random_spd(&mut rng, 0.1, 0.5))
                    .unwrap()
            })
            .collect();
        let sensor = SensorModel::normalized(mixands).unwrap();
        let alpha = rng.random_range(0.2..0.8);
        let robot_cov = random_spd(&mut rng, 0.001, 0.05);
        let tr = track([0.0, 0.0], &random_spd(&mut rng, 0.001, 0.1));
        let x = DVector::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        if jensen_inner_bound(&sensor, &robot_cov, &tr, alpha, &x).unwrap() {
            certified += 1;
            let p = sensor.detect_prob_gaussian(&x, &robot_cov, &tr.position()).unwrap();
            if p < 1.0 - alpha {
                false_pos += 1;
            }
        }
    }
    check(certified > 50, format!("only {certified} probes certified"))?;
    check(false_pos == 0, format!("{false_pos} false positives"))?;
    Ok(format!("{certified} of 1000 probes certified, 0 false positives"))
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(row: usize, cost: &[Vec<f64>], used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cost.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[row][c] + go(row + 1, cost, used));
                used[c] = false;
            }
        }
        best
    }
    go(0, cost, &mut vec![false; cost.len()])
}

fn assignment_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for inst in 0..100 {
        let n = rng.random_range(1..=6);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let cols = hungarian(&cost);
        let mut seen = vec![false; n];
        for &c in &cols {
            check(!seen[c], format!("instance {inst}: column {c} used twice"))?;
            seen[c] = true;
        }
        let total: f64 = cols.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        let best = brute_force(&cost);
        check((total - best).abs() < 1e-9, format!("instance {inst}: {total} vs optimum {best}"))?;
    }
    Ok("100 instances optimal".into())
}

fn riccati_consistency() -> Outcome {
    let model = LtiModel::default_planar();
    let cfg = StudyConfig { trials: 50, horizons: 200, ..StudyConfig::default() };
    let report = intermittent_covariance_study(&model, 1.0, &cfg).map_err(|e| e.to_string())?;
    let fixed = riccati_fixed_point(&model.lifted(cfg.steps_per_horizon).unwrap()).unwrap();
    let target = jetplan::linalg::spectral_norm(&fixed);
    let worst = report.norms.iter().map(|n| (n - target).abs()).fold(0.0, f64::max);
    check(worst < 1e-6, format!("norm gap {worst:.2e} from fixed point {target:.6}"))?;
    Ok(format!("fixed-point norm {target:.6}, worst gap {worst:.1e}"))
}

fn covariance_study() -> Outcome {
    let start = Instant::now();
    let model = LtiModel::default_planar();
    let cfg = StudyConfig::default();
    let low = intermittent_covariance_study(&model, 0.65, &cfg).map_err(|e| e.to_string())?;
    let high = intermittent_covariance_study(&model, 0.75, &cfg).map_err(|e| e.to_string())?;
    check(high.mean_norm < low.mean_norm, format!("means {} vs {}", high.mean_norm, low.mean_norm))?;
    let mut grid: Vec<f64> = low.norms.iter().chain(&high.norms).copied().collect();
    grid.sort_by(f64::total_cmp);
    for t in grid.iter().step_by(97) {
        check(high.cdf(*t) >= low.cdf(*t), format!("CDF crosses at {t}"))?;
    }
    check(low.pmf_peak_fraction > 0.5 && high.pmf_peak_fraction > 0.5, "PMF peak bin holds less than half")?;
    check(start.elapsed() < Duration::from_secs(60), "study slower than a minute")?;
    Ok(format!(
        "mean {:.4} (p=0.65) > {:.4} (p=0.75), peak bins {:.3}/{:.3}",
        low.mean_norm, high.mean_norm, low.pmf_peak_fraction, high.pmf_peak_fraction
    ))
}

fn peak_objective() -> PathObjective {
    let belief = GaussianMixture::single(1.0, Gaussian::isotropic(&[1.0, 1.0], 0.1).unwrap()).unwrap();
    PathObjective::new(belief, SensorModel::isotropic(0.5, 2).unwrap())
}

fn corridor_solve(v_max: f64) -> PathSolution {
    let bounds = ControlBounds::new(v_max, 3.0).unwrap();
    solve_path(&UnicycleState::new(0.0, 0.0, 0.0), &Vector2::new(2.0, 0.0), &peak_objective(), &bounds, 2.0, &PathOptions::default())
        .unwrap()
}

fn path_planner() -> Outcome {
    let obj = peak_objective();
    let cases: Vec<(UnicycleState, Vector2<f64>, f64, Option<f64>)> = vec![
        (UnicycleState::new(0.0, 0.0, 0.0), Vector2::new(2.0, 0.0), 1.0, None),
        (UnicycleState::new(0.0, 0.0, 0.0), Vector2::new(2.0, 0.0), 1.8, None),
        (UnicycleState::new(0.0, 0.0, 0.0), Vector2::new(2.0, 0.0), 3.3, None),
        (UnicycleState::new(0.0, 0.0, 1.0), Vector2::new(1.0, -1.0), 1.5, None),
        (UnicycleState::new(0.5, 0.5, 3.0), Vector2::new(1.5, 0.5), 1.5, None),
        (UnicycleState::new(0.0, 0.0, 0.0), Vector2::new(1.5, 1.0), 1.5, Some(1.5)),
    ];
    let mut worst: f64 = 0.0;
    for (i, (start, goal, v, heading)) in cases.iter().enumerate() {
        let bounds = ControlBounds::new(*v, 3.0).unwrap();
        let opts = PathOptions { terminal_heading: *heading, ..PathOptions::default() };
        let sol = solve_path(start, goal, &obj, &bounds, 2.0, &opts).map_err(|e| format!("case {i}: {e}"))?;
        worst = worst.max(sol.max_defect).max(sol.terminal_residual);
        check(sol.max_defect <= 1e-4, format!("case {i}: defect {}", sol.max_defect))?;
        check(sol.terminal_residual <= 1e-4, format!("case {i}: terminal residual {}", sol.terminal_residual))?;
        check(sol.trajectory.knots.iter().all(|k| bounds.contains(&k.control)), format!("case {i}: controls out of bounds"))?;
    }

    let tr = Transcription::new(
        UnicycleState::new(0.0, 0.0, 0.0),
        Vector2::new(2.0, 0.0),
        None,
        ControlBounds::new(1.8, 3.0).unwrap(),
        2.0,
        21,
        0.0,
        &obj,
        1e-4,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_grad: f64 = 0.0;
    for _ in 0..10 {
        let z = DVector::from_fn(tr.n_vars(), |_, _| rng.random_range(-1.0..1.0));
        let (_, g) = tr.cost_grad(&z);
        for j in 0..z.len() {
            let e = 1e-6;
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[j] += e;
            zm[j] -= e;
            let fd = (tr.cost(&zp) - tr.cost(&zm)) / (2.0 * e);
            let err = (fd - g[j]).abs() / (1.0 + fd.abs());
            worst_grad = worst_grad.max(err);
            check(err <= 1e-5, format!("gradient entry {j}: {fd} vs {}", g[j]))?;
        }
    }

    let straight = corridor_solve(1.0);
    let excess = corridor_solve(1.8);
    let j_line = objective_along_path(&obj, &straight.trajectory).unwrap();
    let j_opt = objective_along_path(&obj, &excess.trajectory).unwrap();
    check(j_opt > j_line, format!("optimized {j_opt} not above straight line {j_line}"))?;
    Ok(format!("worst residual {worst:.1e}, worst gradient error {worst_grad:.1e}, objective {j_opt:.4} > {j_line:.4}"))
}

fn authority_sweep() -> Outcome {
    let mut prev = (0.0, 0.0);
    let mut rows = Vec::new();
    for v in [1.3, 1.8, 3.3] {
        let sol = corridor_solve(v);
        let lateral = sol.trajectory.knots.iter().map(|k| k.state.y.abs()).fold(0.0, f64::max);
        let length = sol.trajectory.length();
        check(lateral >= prev.0 - 1e-6, format!("lateral {lateral} drops at {v}x"))?;
        check(length >= prev.1 - 1e-6, format!("length {length} drops at {v}x"))?;
        prev = (lateral, length);
        rows.push(format!("{v}x: lateral {lateral:.3} length {length:.3}"));
    }
    Ok(rows.join(", "))
}

fn replica() -> Outcome {
    let start = Instant::now();
    let (mut discovered, mut nominal, mut failed) = (0, 0, 0);
    for seed in 0..20 {
        let out = run_scenario_with(&ScenarioConfig::replica(seed), RunOptions { keep_steps: false })
            .map_err(|e| format!("seed {seed}: {e}"))?;
        check(out.error.is_none(), format!("seed {seed}: {:?}", out.error))?;
        if out.metrics.all_discovered() {
            discovered += 1;
        }
        for g in out.metrics.nominal_guarantees() {
            nominal += 1;
            if !g.satisfied {
                failed += 1;
            }
        }
    }
    check(discovered >= 18, format!("all objects found in only {discovered}/20 seeds"))?;
    check(failed == 0, format!("{failed} of {nominal} nominal horizons not certified"))?;
    check(start.elapsed() < Duration::from_secs(600), "replica slower than ten minutes")?;
    Ok(format!("{discovered}/20 seeds discovered all, {nominal} nominal checks certified, {:.0?}", start.elapsed()))
}

fn calibration() -> Outcome {
    let (mut detected, mut total) = (0usize, 0usize);
    let mut planned = 0.0;
    let mut seed = 0;
    while total < 2000 {
        let cfg = ScenarioConfig::calibration(seed);
        seed += 1;
        let alpha = cfg.params.alpha;
        let out = run_scenario_with(&cfg, RunOptions { keep_steps: false }).map_err(|e| e.to_string())?;
        check(out.error.is_none(), format!("seed {seed}: {:?}", out.error))?;
        let first = out.metrics.terminal_outcomes.first();
        let guarantee = out.metrics.guarantees.first();
        // Only horizons that planned against the constraint count.
        if let (Some(o), Some(g)) = (first, guarantee) {
            if out.metrics.fallback_horizons.first().is_some_and(|t| *t == 0.0) {
                continue;
            }
            check(g.probability >= 1.0 - alpha - 1e-9, format!("seed {seed}: planned {}", g.probability))?;
            planned += g.probability;
            total += 1;
            if o.detected {
                detected += 1;
            }
        }
        check(seed < 4000, "too few horizons planned against the constraint")?;
    }
    let rate = detected as f64 / total as f64;
    let alpha = ScenarioConfig::calibration(0).params.alpha;
    check(rate >= 1.0 - alpha - 0.03, format!("detection rate {rate:.4} below {:.2}", 1.0 - alpha - 0.03))?;
    Ok(format!("rate {rate:.4} over {total} horizons, mean planned {:.4}", planned / total as f64))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("detection kernel matches Monte-Carlo", detection_kernel_oracle),
        ("feasibility ellipsoid interior is sound", ellipsoid_soundness),
        ("Jensen bound has no false positives", jensen_soundness),
        ("assignment matches brute force", assignment_optimality),
        ("full detection collapses to the Riccati fixed point", riccati_consistency),
        ("covariance study ordering and shape", covariance_study),
        ("path planner correctness", path_planner),
        ("control-authority sweep is monotone", authority_sweep),
        ("five-robot replica", replica),
        ("per-horizon chance-constraint calibration", calibration),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("{:>2} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS {label} ({:.1?}): {detail}", start.elapsed()),
            Err(why) => {
                failures += 1;
                println!("FAIL {label} ({:.1?}): {why}", start.elapsed());
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
