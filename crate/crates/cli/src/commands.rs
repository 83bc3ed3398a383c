use std::io::Write;
use std::path::Path;
use std::time::Instant;

use jetplan::jet::{Role, StepRecord};
use jetplan::sim::{path_metrics, run_scenario, ScenarioConfig, ScenarioOutput, TruthRecord};
use jetplan::tracker::{intermittent_covariance_study, LtiModel, StudyConfig};
use serde::Serialize;

use crate::config;
use crate::error::{CliError, CliResult};
use crate::output::{OutputDir, RunManifest};

#[derive(Serialize)]
struct StepRow {
    tick: usize,
    time: f64,
    robot: usize,
    x: f64,
    y: f64,
    theta: f64,
    v: f64,
    omega: f64,
    role: String,
    pursuit: bool,
    belief_mass: f64,
    tracks: usize,
    replanned: bool,
    horizon_start: bool,
}

fn role_label(role: Role) -> String {
    match role {
        Role::Exploring => "explore".into(),
        Role::Tracking(t) => format!("track:{t}"),
    }
}

fn write_steps(dir: &OutputDir, steps: &[StepRecord]) -> CliResult<()> {
    let mut csv = dir.csv("steps.csv")?;
    let mut jsonl = dir.writer("steps.jsonl")?;
    for (tick, s) in steps.iter().enumerate() {
        for r in &s.robots {
            csv.serialize(StepRow {
                tick,
                time: s.time,
                robot: r.id,
                x: r.x,
                y: r.y,
                theta: r.theta,
                v: r.v,
                omega: r.omega,
                role: role_label(r.role),
                pursuit: r.pursuit,
                belief_mass: s.belief_mass,
                tracks: s.tracks.len(),
                replanned: s.replanned,
                horizon_start: s.horizon_start,
            })?;
        }
        serde_json::to_writer(&mut jsonl, s)?;
        writeln!(jsonl)?;
    }
    csv.flush()?;
    jsonl.flush()?;
    Ok(())
}

fn write_truth(dir: &OutputDir, truth: &[TruthRecord]) -> CliResult<()> {
    let mut w = dir.csv("truth.csv")?;
    w.write_record(["time", "kind", "index", "x", "y", "theta"])?;
    for rec in truth {
        let t = rec.time.to_string();
        for (i, r) in rec.robots.iter().enumerate() {
            w.write_record([t.as_str(), "robot", &i.to_string(), &r[0].to_string(), &r[1].to_string(), &r[2].to_string()])?;
        }
        for (j, o) in rec.objects.iter().enumerate() {
            w.write_record([t.as_str(), "object", &j.to_string(), &o[0].to_string(), &o[1].to_string(), ""])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    ticks: usize,
    horizons: usize,
    fallback_horizons: usize,
    discovery_times: &'a [Option<f64>],
    all_discovered: bool,
    nominal_checks: usize,
    nominal_failures: usize,
    terminal_detection_rate: Option<f64>,
    warnings: usize,
    heatmaps: usize,
    error: Option<&'a str>,
}

fn summarize(out: &ScenarioOutput) -> RunSummary<'_> {
    let m = &out.metrics;
    RunSummary {
        ticks: out.truth.len(),
        horizons: m.horizons,
        fallback_horizons: m.fallback_horizons.len(),
        discovery_times: &m.discovery_times,
        all_discovered: m.all_discovered(),
        nominal_checks: m.nominal_guarantees().count(),
        nominal_failures: m.nominal_guarantees().filter(|g| !g.satisfied).count(),
        terminal_detection_rate: m.terminal_detection_rate(),
        warnings: m.warnings.len(),
        heatmaps: out.heatmaps.len(),
        error: out.error.as_deref(),
    }
}

fn with_seed(mut cfg: ScenarioConfig, seed: Option<u64>) -> ScenarioConfig {
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.params.seed = s;
    }
    cfg
}

fn simulate(cfg: &ScenarioConfig) -> CliResult<ScenarioOutput> {
    let started = Instant::now();
    let out = run_scenario(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    log::info!("simulated {} ticks in {:.1?}", out.truth.len(), started.elapsed());
    Ok(out)
}

pub fn run(path: &Path, seed: Option<u64>, out: &Path, heatmap_every: Option<u64>) -> CliResult<()> {
    let (cfg, text) = config::load(path)?;
    let mut cfg = with_seed(cfg, seed);
    if let Some(every) = heatmap_every {
        cfg.heatmap_every = every;
    }
    let manifest = RunManifest::new("run", Some((path, &text)), cfg.seed, out, &cfg.heatmap_every.to_string());
    let dir = OutputDir::create(out, &manifest)?;
    let result = simulate(&cfg);
    let finished = match &result {
        Ok(res) => write_run(&dir, res),
        Err(_) => Ok(()),
    };
    let target = dir.finish()?;
    finished?;
    let res = result?;
    if let Some(e) = &res.error {
        return Err(CliError::Runtime(format!("{e} (partial logs in {})", target.display())));
    }
    let s = summarize(&res);
    println!(
        "{}: {} ticks, {} horizons, {} fallback, discovered {}/{}",
        target.display(),
        s.ticks,
        s.horizons,
        s.fallback_horizons,
        s.discovery_times.iter().filter(|t| t.is_some()).count(),
        s.discovery_times.len()
    );
    Ok(())
}

fn write_run(dir: &OutputDir, res: &ScenarioOutput) -> CliResult<()> {
    write_steps(dir, &res.steps)?;
    write_truth(dir, &res.truth)?;
    for (tick, grid) in &res.heatmaps {
        let mut w = dir.writer(&format!("heatmap_{tick:04}.csv"))?;
        grid.write_csv(&mut w)?;
        w.flush()?;
    }
    dir.write_json("summary.json", &summarize(res))
}

#[derive(Serialize)]
struct StudySummary<'a> {
    horizons: usize,
    trials: usize,
    steps_per_horizon: usize,
    seed: u64,
    studies: Vec<&'a jetplan::tracker::CovarianceStudyReport>,
}

pub fn cov_study(probs: &[f64], horizons: usize, trials: usize, seed: u64, out: &Path) -> CliResult<()> {
    if probs.is_empty() {
        return Err(CliError::Config("at least one --p is required".into()));
    }
    if let Some(p) = probs.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(CliError::Config(format!("--p {p}: detection probability must be in (0, 1]")));
    }
    if horizons == 0 || trials == 0 {
        return Err(CliError::Config("--horizons and --trials must be positive".into()));
    }
    let study = StudyConfig { horizons, trials, rng_seed: seed, ..StudyConfig::default() };
    let extra = format!("{probs:?}/{horizons}/{trials}");
    let dir = OutputDir::create(out, &RunManifest::new("cov-study", None, seed, out, &extra))?;
    let model = LtiModel::default_planar();
    let mut reports = Vec::new();
    for &p in probs {
        let report = intermittent_covariance_study(&model, p, &study).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut w = dir.writer(&format!("norms_p{p}.csv"))?;
        report.write_csv(&mut w)?;
        w.flush()?;
        println!("p={p}: mean norm {:.4} m^2, peak bin {:.3}", report.mean_norm, report.pmf_peak_fraction);
        reports.push(report);
    }
    dir.write_json(
        "summary.json",
        &StudySummary {
            horizons,
            trials,
            steps_per_horizon: study.steps_per_horizon,
            seed,
            studies: reports.iter().collect(),
        },
    )?;
    dir.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct SweepEntry {
    speed: f64,
    path_length: f64,
    lateral_deviation: f64,
    error: Option<String>,
}

#[derive(Serialize)]
struct SweepSummary {
    runs: Vec<SweepEntry>,
    length_non_decreasing: bool,
    lateral_non_decreasing: bool,
}

fn non_decreasing(xs: impl Iterator<Item = f64> + Clone) -> bool {
    xs.clone().zip(xs.skip(1)).all(|(a, b)| b >= a - 1e-6)
}

pub fn authority_sweep(path: &Path, speeds: &[f64], seed: Option<u64>, out: &Path) -> CliResult<()> {
    if speeds.is_empty() {
        return Err(CliError::Config("--speeds needs at least one value".into()));
    }
    if let Some(v) = speeds.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(CliError::Config(format!("--speeds: {v} is not a positive speed")));
    }
    let (cfg, text) = config::load(path)?;
    if cfg.robots.len() != 1 || cfg.objects.len() != 1 {
        return Err(CliError::Config(format!(
            "{}: the sweep needs exactly one robot and one object, found {} and {}",
            path.display(),
            cfg.robots.len(),
            cfg.objects.len()
        )));
    }
    let cfg = with_seed(cfg, seed);
    let manifest = RunManifest::new("authority-sweep", Some((path, &text)), cfg.seed, out, &format!("{speeds:?}"));
    let dir = OutputDir::create(out, &manifest)?;
    let mut runs = Vec::new();
    let mut failure = None;
    for &v in speeds {
        let mut c = cfg.clone();
        c.robots[0].v_max = v;
        let res = match simulate(&c) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let mut w = dir.csv(&format!("path_v{v}.csv"))?;
        w.write_record(["time", "robot_x", "robot_y", "robot_theta", "object_x", "object_y"])?;
        for r in &res.truth {
            let (p, o) = (r.robots[0], r.objects[0]);
            w.write_record([r.time, p[0], p[1], p[2], o[0], o[1]].map(|x| x.to_string()))?;
        }
        w.flush()?;
        let (length, lateral) = path_metrics(&res.truth, 0, 0);
        println!("v={v}: path length {length:.3} m, lateral deviation {lateral:.3} m");
        if let Some(e) = &res.error {
            failure = Some(CliError::Runtime(format!("v={v}: {e}")));
        }
        runs.push(SweepEntry { speed: v, path_length: length, lateral_deviation: lateral, error: res.error });
        if failure.is_some() {
            break;
        }
    }
    let summary = SweepSummary {
        length_non_decreasing: non_decreasing(runs.iter().map(|r| r.path_length)),
        lateral_non_decreasing: non_decreasing(runs.iter().map(|r| r.lateral_deviation)),
        runs,
    };
    dir.write_json("summary.json", &summary)?;
    dir.finish()?;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn validate(path: &Path, write: Option<&Path>) -> CliResult<()> {
    let (cfg, _) = config::load(path)?;
    let normalized = serde_json::to_string_pretty(&cfg)?;
    let again = config::parse(path, &normalized)?;
    if again != cfg {
        return Err(CliError::Runtime("normalized config does not re-parse identically".into()));
    }
    if let Some(w) = write {
        std::fs::write(w, format!("{normalized}\n"))?;
    }
    println!(
        "{}: ok ({} robots, {} objects, {} ticks)",
        path.display(),
        cfg.robots.len(),
        cfg.objects.len(),
        cfg.ticks()
    );
    Ok(())
}

pub fn example(cfg: &ScenarioConfig, out: Option<&Path>) -> CliResult<()> {
    let text = format!("{}\n", serde_json::to_string_pretty(cfg)?);
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
