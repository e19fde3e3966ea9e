//! `icm3d`: generate scenes, check target encodings, train, infer, evaluate,
//! benchmark and compare against the embed-and-cluster baseline.
//!
//! Stdout carries `key=value` lines only; prose goes to stderr. Exit codes:
//! 0 success, 2 usage or configuration, 3 data, 4 numeric failure.

mod commands;
mod config;
mod dataset;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use icm3d::alloc::CountingAllocator;

use crate::config::RunConfig;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

#[derive(Parser, Debug)]
#[command(name = "icm3d", version, about = "Spatial-cube instance segmentation lab")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr0=0.002`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for training. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct PathArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset directory.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset and its manifest.
    Generate {
        #[command(flatten)]
        paths: PathArgs,
        /// Number of scenes (data.scenes).
        #[arg(long)]
        count: Option<usize>,
        /// Reuse a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Check flatten/project equivalence and oracle round-trips on a dataset.
    EncodeCheck {
        #[command(flatten)]
        paths: PathArgs,
        /// Grid size (train.n_s).
        #[arg(long)]
        n_s: Option<usize>,
        /// Center-region scale (train.center_scale).
        #[arg(long)]
        scale: Option<f64>,
        /// Also sweep the grid sizes in eval.sweep and write sweep.csv and sweep.svg.
        #[arg(long)]
        sweep: bool,
        /// Report collided cubes without failing.
        #[arg(long)]
        allow_collisions: bool,
    },
    /// Train a model and write checkpoint.json and train_log.csv.
    Train {
        #[command(flatten)]
        paths: PathArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Step budget (train.max_steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write per-scene predictions and point partitions.
    Infer {
        #[command(flatten)]
        paths: PathArgs,
        /// Decode the ground-truth targets instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Score predictions against the labels and write metrics.csv.
    Eval {
        #[command(flatten)]
        paths: PathArgs,
        /// Directory of prediction CSVs written by `infer`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Decode the ground-truth targets instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Time forward plus decode of the flatten and project heads.
    Bench {
        #[command(flatten)]
        paths: PathArgs,
        #[arg(long)]
        flatten_checkpoint: Option<PathBuf>,
        #[arg(long)]
        project_checkpoint: Option<PathBuf>,
    },
    /// Train the cube head and the embed-and-cluster arm on the same data and compare them.
    CompareBaseline {
        #[command(flatten)]
        paths: PathArgs,
        /// Step budget for both arms (train.max_steps).
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn apply_paths(cfg: &mut RunConfig, p: PathArgs) {
    let dst = &mut cfg.paths;
    for (slot, value) in
        [(&mut dst.data, p.data), (&mut dst.test_data, p.test_data), (&mut dst.out, p.out), (&mut dst.checkpoint, p.checkpoint)]
    {
        if value.is_some() {
            *slot = value;
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        anyhow::bail!(exit::UsageError("--threads must be at least 1".into()));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let threads = cli.threads;
    match cli.command {
        Command::Generate { paths, count, force } => {
            apply_paths(&mut cfg, paths);
            if let Some(n) = count {
                cfg.data.scenes = n;
            }
            commands::generate(&cfg, force)
        }
        Command::EncodeCheck { paths, n_s, scale, sweep, allow_collisions } => {
            apply_paths(&mut cfg, paths);
            if let Some(n) = n_s {
                cfg.train.n_s = n;
            }
            if let Some(s) = scale {
                cfg.train.center_scale = s;
            }
            cfg.validate()?;
            commands::encode_check(&cfg, sweep, allow_collisions)
        }
        Command::Train { paths, resume, steps } => {
            apply_paths(&mut cfg, paths);
            if resume.is_some() {
                cfg.paths.resume = resume;
            }
            if steps.is_some() {
                cfg.train.max_steps = steps;
            }
            commands::train(&cfg, threads)
        }
        Command::Infer { paths, oracle } => {
            apply_paths(&mut cfg, paths);
            commands::infer(&cfg, oracle)
        }
        Command::Eval { paths, predictions, oracle } => {
            apply_paths(&mut cfg, paths);
            if predictions.is_some() {
                cfg.paths.predictions = predictions;
            }
            commands::eval(&cfg, oracle)
        }
        Command::Bench { paths, flatten_checkpoint, project_checkpoint } => {
            apply_paths(&mut cfg, paths);
            if flatten_checkpoint.is_some() {
                cfg.paths.flatten_checkpoint = flatten_checkpoint;
            }
            if project_checkpoint.is_some() {
                cfg.paths.project_checkpoint = project_checkpoint;
            }
            commands::bench(&cfg)
        }
        Command::CompareBaseline { paths, steps } => {
            apply_paths(&mut cfg, paths);
            if steps.is_some() {
                cfg.train.max_steps = steps;
            }
            commands::compare_baseline(&cfg, threads)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
