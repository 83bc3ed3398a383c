mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "jetplan", version, about = "Joint exploration and tracking simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write logs, summary and belief heat maps.
    Run {
        config: PathBuf,
        /// Overrides the seed stored in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Ticks between heat-map snapshots; overrides the config.
        #[arg(long)]
        heatmap_every: Option<u64>,
    },
    /// Monte-Carlo study of the track covariance under intermittent detections.
    CovStudy {
        /// Detection probability; repeat for several studies.
        #[arg(long = "p", default_values_t = [0.65, 0.75])]
        probs: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        horizons: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat a one-robot scenario at several top speeds.
    AuthoritySweep {
        config: PathBuf,
        /// Comma-separated robot top speeds in m/s.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        speeds: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config and confirm that its normalized form re-parses identically.
    Validate {
        config: PathBuf,
        /// Write the normalized config here.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Print a built-in scenario as a config file.
    Example {
        #[arg(value_enum)]
        scenario: Example,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Robot top speed for the single-robot scenario.
        #[arg(long, default_value_t = 1.8)]
        speed: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Example {
    Replica,
    SingleRobot,
    Calibration,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("JETPLAN_LOG_LEVEL", "warn"))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, heatmap_every } => commands::run(&config, seed, &out, heatmap_every),
        Command::CovStudy { probs, horizons, trials, seed, out } => {
            commands::cov_study(&probs, horizons, trials, seed, &out)
        }
        Command::AuthoritySweep { config, speeds, seed, out } => commands::authority_sweep(&config, &speeds, seed, &out),
        Command::Validate { config, write } => commands::validate(&config, write.as_deref()),
        Command::Example { scenario, seed, speed, out } => {
            let cfg = match scenario {
                Example::Replica => jetplan::sim::ScenarioConfig::replica(seed),
                Example::SingleRobot => jetplan::sim::ScenarioConfig::single_robot(speed, seed),
                Example::Calibration => jetplan::sim::ScenarioConfig::calibration(seed),
            };
            commands::example(&cfg, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jetplan: {e}");
            e.exit_code()
        }
    }
}
