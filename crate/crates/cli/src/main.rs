//! `physnet`: generate synthetic corpora, train, evaluate, run ablation grids
//! and self-checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 failed checks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use physnet::oracles::OracleConfig;
use physnet::sim::Split;
use physnet::train::LambdaMode;

use config::{AblationRow, Preset, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "physnet",
    version,
    about = "Reaction-diffusion physics in CNN feature learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every run command.
#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; any flag given overrides it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings the configuration file is layered on.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Training seed (initialisation, shuffling, augmentation).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_lambda_mode)]
    lambda_mode: Option<LambdaMode>,
    /// Drop the PDE residual term.
    #[arg(long)]
    disable_physics: bool,
    /// Drop the boundary smoothness term.
    #[arg(long)]
    disable_boundary: bool,
    /// Drop the temporal consistency term.
    #[arg(long)]
    disable_temporal: bool,
    /// Hold the physics weight constant at this value.
    #[arg(long)]
    fixed_lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with ground-truth density fields.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory [default: $PHYSNET_REPORT_DIR/dataset].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Samples per class.
        #[arg(long = "n")]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Side of the rendered images.
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train a model and write its checkpoint and epoch log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory [default: $PHYSNET_REPORT_DIR/train].
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint and fit per-class physical parameters.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory [default: $PHYSNET_REPORT_DIR/eval].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Optimiser steps of the per-class parameter fit.
        #[arg(long)]
        finetune_steps: Option<usize>,
        /// Skip the per-class parameter fit.
        #[arg(long)]
        no_finetune: bool,
    },
    /// Train the ablation grid with shared seeds and tabulate the results.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory [default: $PHYSNET_REPORT_DIR/ablate].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated rows.
        #[arg(long, value_delimiter = ',', value_enum)]
        rows: Option<Vec<AblationRow>>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run the numerical self-checks.
    Check {
        /// Tolerance of the per-operation gradient checks.
        #[arg(long, default_value_t = OracleConfig::default().op_grad_tol)]
        grad_tol: f64,
        /// Tolerance of the whole-objective gradient check.
        #[arg(long, default_value_t = OracleConfig::default().loss_grad_tol)]
        loss_grad_tol: f64,
        /// Grid side of the front-speed runs.
        #[arg(long, default_value_t = OracleConfig::default().front_grid)]
        front_grid: usize,
        #[arg(long, default_value_t = OracleConfig::default().stencil_fields)]
        stencil_fields: usize,
        /// Report directory [default: $PHYSNET_REPORT_DIR/check].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: physnet::Error| e.to_string())
}

fn parse_lambda_mode(s: &str) -> Result<LambdaMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown lambda mode `{s}` (adaptive, literal, fixed)"))
}

fn apply_train_args(cfg: &mut RunConfig, a: TrainArgs) {
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.lambda_mode {
        cfg.train.lambda.mode = v;
    }
    cfg.ablation.disable_physics |= a.disable_physics;
    cfg.ablation.disable_boundary |= a.disable_boundary;
    cfg.ablation.disable_temporal |= a.disable_temporal;
    if a.fixed_lambda.is_some() {
        cfg.ablation.fixed_lambda = a.fixed_lambda;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let resolve = |c: &ConfigArgs| RunConfig::resolve(c.preset, c.config.as_deref());
    match cli.command {
        Command::Gen {
            cfg,
            out,
            n,
            seed,
            image_size,
        } => {
            let mut rc = resolve(&cfg)?;
            if let Some(v) = n {
                rc.gen.n_per_class = v;
            }
            if let Some(v) = seed {
                rc.gen.seed = v;
            }
            if let Some(v) = image_size {
                rc.gen.config.render.output_size = v;
            }
            commands::gen(rc, out)
        }
        Command::Train { cfg, data, out, train } => {
            let mut rc = resolve(&cfg)?;
            apply_train_args(&mut rc, train);
            commands::train(rc, data, out)
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            out,
            split,
            finetune_steps,
            no_finetune,
        } => {
            let mut rc = resolve(&cfg)?;
            if let Some(v) = finetune_steps {
                rc.finetune.steps = v;
            }
            commands::eval(rc, checkpoint, data, out, split, !no_finetune)
        }
        Command::Ablate {
            cfg,
            data,
            out,
            seeds,
            rows,
            train,
        } => {
            let mut rc = resolve(&cfg)?;
            if let Some(v) = seeds {
                rc.ablate.seeds = v;
            }
            if let Some(v) = rows {
                rc.ablate.rows = v;
            }
            apply_train_args(&mut rc, train);
            commands::ablate(rc, data, out)
        }
        Command::Check {
            grad_tol,
            loss_grad_tol,
            front_grid,
            stencil_fields,
            out,
        } => {
            let oracle = OracleConfig {
                op_grad_tol: grad_tol,
                loss_grad_tol,
                front_grid,
                stencil_fields,
                ..OracleConfig::default()
            };
            commands::check(oracle, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
