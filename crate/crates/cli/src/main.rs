//! `qfbsim`: runs feedback-stabilization experiments from a JSON config and
//! writes CSV tables with a `<out>.meta.json` sidecar.

mod checks;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use qfb_core::experiments::{self, ExperimentConfig, Table};
use serde_json::json;

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Experiment {
    /// Ensemble time series for the configured controller
    Simulate,
    /// Final state against the Rabi gain
    SweepGain,
    /// Final state against the Rabi rotation angle
    SweepAlpha,
    /// Final state against the FM phase
    SweepBeta,
    /// Final state against the target polar angle
    SweepTheta,
    /// Transient from the thermal state with exponential fits
    Transient,
    /// Empirical optimum of the FM gain
    OptimizeGfm,
    /// Markovian-limit oracle against Monte Carlo
    OracleCompare,
}

impl Experiment {
    fn name(self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }

    fn run(self, cfg: &ExperimentConfig) -> qfb_core::Result<Table> {
        match self {
            Self::Simulate => experiments::simulate(cfg),
            Self::SweepGain => experiments::sweep_gain(cfg),
            Self::SweepAlpha => experiments::sweep_alpha(cfg),
            Self::SweepBeta => experiments::sweep_beta(cfg),
            Self::SweepTheta => experiments::sweep_theta(cfg),
            Self::Transient => experiments::transient(cfg),
            Self::OptimizeGfm => experiments::optimize_gfm(cfg).map(|o| o.table),
            Self::OracleCompare => experiments::oracle_compare(cfg),
        }
    }

    fn checks(self, cfg: &ExperimentConfig, t: &Table) -> Vec<checks::Check> {
        match self {
            Self::Simulate => checks::simulate(cfg, t),
            Self::SweepGain => checks::sweep_gain(cfg, t),
            Self::SweepAlpha => checks::sweep_alpha(cfg, t),
            Self::SweepBeta => checks::sweep_beta(cfg, t),
            Self::SweepTheta => checks::sweep_theta(cfg, t),
            Self::Transient => checks::transient(cfg, t),
            Self::OptimizeGfm => checks::optimize_gfm(cfg, t),
            Self::OracleCompare => checks::oracle_compare(cfg, t),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "qfbsim", version, about = "Monte Carlo feedback-stabilization experiments")]
struct Cli {
    #[arg(value_enum)]
    experiment: Experiment,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dotted-key override such as `physical.eta=0.5` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of trajectories
    #[arg(long)]
    n: Option<usize>,
    /// Integration step in seconds
    #[arg(long)]
    dt: Option<f64>,
    /// Evaluate the subcommand's acceptance checks; exit 3 on failure
    #[arg(long)]
    check: bool,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_CHECK: u8 = 3;

fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("sim.seed={s}"));
    }
    if let Some(n) = cli.n {
        overrides.push(format!("sim.n_trajectories={n}"));
    }
    if let Some(dt) = cli.dt {
        overrides.push(format!("sim.dt={dt:e}"));
    }
    let cfg = match config::load(&cli.config, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("qfbsim: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };

    let started = Instant::now();
    let table = match cli.experiment.run(&cfg) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("qfbsim: {e}");
            let code = match e {
                qfb_core::Error::InvalidParameter { .. } | qfb_core::Error::AngleOutOfRange { .. } => EXIT_CONFIG,
                _ => EXIT_NUMERICAL,
            };
            return ExitCode::from(code);
        }
    };
    let wall = started.elapsed().as_secs_f64();

    let checks = if cli.check {
        cli.experiment.checks(&cfg, &table)
    } else {
        Vec::new()
    };
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }

    let meta = json!({
        "experiment": cli.experiment.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.sim.seed,
        "wall_time_s": wall,
        "config": cfg,
        "controller": cfg.controller_config().ok(),
        "summary": table.summary,
        "warnings": table.warnings,
        "checks": checks,
    });
    let meta_text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    if let Err(e) = std::fs::write(&cli.out, table.to_csv()).and_then(|_| std::fs::write(meta_path(&cli.out), meta_text)) {
        eprintln!("qfbsim: cannot write {}: {e}", cli.out.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    for w in &table.warnings {
        log::warn!("{w}");
    }
    if checks.iter().any(|c| !c.passed) {
        return ExitCode::from(EXIT_CHECK);
    }
    ExitCode::SUCCESS
}
