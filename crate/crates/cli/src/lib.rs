//! Experiment driver for the normalization laboratory.
//!
//! Wraps the core library in a small batch-experiment workflow: strict TOML
//! configs, deterministic training runs that stream CSV metrics, grid sweeps
//! over the regularizer strengths, post-hoc statistic re-estimation, and
//! report generation from previously written logs.
//!
//! Verbs:
//! - `run` — one configured training run into an output directory
//! - `sweep` — a (λ, ν, seed) grid of runs plus best-by-validation selection
//! - `reestimate` — refresh a checkpoint's population statistics with
//!   frozen parameters
//! - `report` — re-derive a run summary from its CSV logs
//!
//! Exit codes: 0 success, 2 unusable input (config, files, flags),
//! 3 training diverged (partial logs are kept).

pub mod checkpoint;
pub mod config;
pub mod csvlog;
pub mod presets;
pub mod runner;
pub mod sweep;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
use runner::RunnerError;

#[derive(Parser, Debug)]
#[command(
    name = "normbench",
    about = "Batch/layer normalization laboratory: train toy transformer encoders and \
             measure statistics discrepancy, penalties, and conditioning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run one configured experiment.
    Run(RunArgs),
    /// Run a (lambda, nu, seed) grid and pick the best by validation loss.
    Sweep(SweepArgs),
    /// Refresh a checkpoint's running statistics with parameters frozen.
    Reestimate(ReestimateArgs),
    /// Rebuild a run summary from the CSV logs in an output directory.
    Report(ReportArgs),
}

/// Flags shared by the config-consuming verbs. Precedence, lowest to
/// highest: built-in defaults, the config file, `--preset`, then the
/// explicit value flags.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named settings bundle (run `run --preset help` for the list).
    #[arg(long)]
    preset: Option<String>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the mean-discrepancy penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the std-discrepancy penalty weight.
    #[arg(long)]
    nu: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory (default `runs/<config-hash>-s<seed>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory (default `sweep-<config-hash>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mean-penalty grid.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.01, 0.1, 1.0])]
    lambdas: Vec<f64>,
    /// Std-penalty grid.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.01, 0.1, 1.0])]
    nus: Vec<f64>,
    /// Seeds; defaults to the (possibly overridden) config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args, Debug)]
struct ReestimateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to refresh.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Measurement passes over the training set.
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    /// Output checkpoint path (default `reestimated.nbck` next to the input).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directory containing the CSV logs.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Builds the effective config from file, preset, and override flags.
fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(&path.display().to_string())
            .map_err(|e| e.to_string())?,
        None => ExperimentConfig::default(),
    };
    if let Some(name) = &args.preset {
        if name == "help" || name == "list" {
            let mut lines = String::from("available presets:\n");
            for p in presets::PRESETS {
                lines.push_str(&format!(
                    "  {:<24} (lambda, nu) = ({}, {}) — {}\n",
                    p.name, p.lambda, p.nu, p.note
                ));
            }
            return Err(lines);
        }
        let preset = presets::apply(&mut cfg, name)?;
        eprintln!("preset {}: {}", preset.name, preset.note);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(lambda) = args.lambda {
        cfg.norm.lambda = lambda;
    }
    if let Some(nu) = args.nu {
        cfg.norm.nu = nu;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn exit_code_for(err: &RunnerError) -> i32 {
    match err {
        RunnerError::Diverged { .. } => 3,
        _ => 2,
    }
}

fn do_run(args: &RunArgs) -> i32 {
    let cfg = match load_config(&args.cfg) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("{msg}");
            return 2;
        }
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-s{}", cfg.hash(), cfg.seed)));
    match runner::run(&cfg, &out) {
        Ok(summary) => {
            match serde_json::to_string_pretty(&summary) {
                Ok(text) => println!("{text}"),
                Err(e) => eprintln!("summary: {e}"),
            }
            0
        }
        Err(e) => {
            eprintln!("{e}");
            exit_code_for(&e)
        }
    }
}

fn do_sweep(args: &SweepArgs) -> i32 {
    let cfg = match load_config(&args.cfg) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("{msg}");
            return 2;
        }
    };
    let grid = sweep::SweepGrid {
        lambdas: args.lambdas.clone(),
        nus: args.nus.clone(),
        seeds: if args.seeds.is_empty() { vec![cfg.seed] } else { args.seeds.clone() },
    };
    let out =
        args.out.clone().unwrap_or_else(|| PathBuf::from(format!("sweep-{}", cfg.hash())));
    match sweep::sweep(&cfg, &grid, &out) {
        Ok(report) => {
            print!("{}", sweep::render_table(&report));
            if report.best.is_some() {
                0
            } else {
                eprintln!("every grid point failed");
                3
            }
        }
        Err(e) => {
            eprintln!("{e}");
            exit_code_for(&e)
        }
    }
}

fn do_reestimate(args: &ReestimateArgs) -> i32 {
    let cfg = match load_config(&args.cfg) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("{msg}");
            return 2;
        }
    };
    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint.parent().unwrap_or(std::path::Path::new(".")).join("reestimated.nbck")
    });
    match runner::reestimate(&cfg, &args.checkpoint, args.epochs, &out) {
        Ok(()) => {
            println!("reestimated over {} epoch(s) -> {}", args.epochs, out.display());
            0
        }
        Err(e) => {
            eprintln!("{e}");
            exit_code_for(&e)
        }
    }
}

fn do_report(args: &ReportArgs) -> i32 {
    match runner::report(&args.out) {
        Ok(summary) => {
            match serde_json::to_string_pretty(&summary) {
                Ok(text) => println!("{text}"),
                Err(e) => eprintln!("summary: {e}"),
            }
            0
        }
        Err(e) => {
            eprintln!("{e}");
            exit_code_for(&e)
        }
    }
}

/// Parses and executes one invocation; returns the process exit code.
pub fn run_cli<S: AsRef<str>>(args: &[S]) -> i32 {
    let cli = match Cli::try_parse_from(args.iter().map(|s| s.as_ref())) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version land here too; clap assigns them code 0.
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match &cli.cmd {
        Cmd::Run(args) => do_run(args),
        Cmd::Sweep(args) => do_sweep(args),
        Cmd::Reestimate(args) => do_reestimate(args),
        Cmd::Report(args) => do_report(args),
    }
}

#[cfg(test)]
mod cli_tests {
    use super::*;

    fn parse_cfg(argv: &[&str]) -> Result<ExperimentConfig, String> {
        let cli = Cli::try_parse_from(argv).map_err(|e| e.to_string())?;
        match &cli.cmd {
            Cmd::Run(r) => load_config(&r.cfg),
            _ => panic!("test expects run"),
        }
    }

    #[test]
    fn flags_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "seed = 7\n[norm]\nlambda = 0.5\nnu = 0.5\n").unwrap();
        let p = path.display().to_string();
        let cfg = parse_cfg(&["normbench", "run", "--config", &p]).unwrap();
        assert_eq!((cfg.seed, cfg.norm.lambda, cfg.norm.nu), (7, 0.5, 0.5));
        let cfg = parse_cfg(&[
            "normbench", "run", "--config", &p, "--seed", "9", "--lambda", "0.25",
        ])
        .unwrap();
        assert_eq!((cfg.seed, cfg.norm.lambda, cfg.norm.nu), (9, 0.25, 0.5));
    }

    #[test]
    fn preset_applies_between_file_and_flags() {
        let cfg = parse_cfg(&["normbench", "run", "--preset", "paper-postnorm-nmt"]).unwrap();
        assert_eq!(cfg.model.norm, "rbn");
        assert_eq!(cfg.model.placement, "post");
        assert_eq!((cfg.norm.lambda, cfg.norm.nu), (10.0, 0.0));
        let cfg = parse_cfg(&[
            "normbench", "run", "--preset", "paper-postnorm-nmt", "--lambda", "0.5",
        ])
        .unwrap();
        assert_eq!((cfg.norm.lambda, cfg.norm.nu), (0.5, 0.0), "flag outranks preset");
    }

    #[test]
    fn bad_inputs_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[norm]\nlambada = 1\n").unwrap();
        let p = path.display().to_string();
        assert_eq!(run_cli(&["normbench", "run", "--config", &p]), 2);
        assert_eq!(run_cli(&["normbench", "run", "--config", "/nonexistent/x.toml"]), 2);
        assert_eq!(run_cli(&["normbench", "run", "--preset", "paper-postnorm-asr"]), 2);
        assert_eq!(run_cli(&["normbench", "frobnicate"]), 2);
        // `=` form reaches config validation rather than clap's hyphen rules.
        assert_eq!(run_cli(&["normbench", "run", "--lambda=-1"]), 2);
    }

    #[test]
    fn run_verb_trains_and_exits_zero() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("exp.toml");
        std::fs::write(
            &cfg_path,
            "[task]\ntrain_size = 32\nvalid_size = 16\n\
             [optim]\nmax_steps = 4\nbatch_size = 16\nwarmup_steps = 4\n\
             [model]\nnorm = \"bn\"\n[measure]\ncond_every = 0\n",
        )
        .unwrap();
        let out = dir.path().join("out");
        let code = run_cli(&[
            "normbench",
            "run",
            "--config",
            &cfg_path.display().to_string(),
            "--out",
            &out.display().to_string(),
        ]);
        assert_eq!(code, 0);
        assert!(out.join("summary.json").exists());
    }

    #[test]
    fn divergence_exits_three() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("exp.toml");
        std::fs::write(
            &cfg_path,
            "[task]\ntrain_size = 32\nvalid_size = 16\n\
             [optim]\nmax_steps = 40\nbatch_size = 16\nwarmup_steps = 1\nbase_lr = 1e9\n\
             [model]\nnorm = \"bn\"\n[measure]\ncond_every = 0\n",
        )
        .unwrap();
        let out = dir.path().join("out");
        let code = run_cli(&[
            "normbench",
            "run",
            "--config",
            &cfg_path.display().to_string(),
            "--out",
            &out.display().to_string(),
        ]);
        assert_eq!(code, 3);
        assert!(out.join("train.csv").exists(), "partial logs kept");
    }
}
