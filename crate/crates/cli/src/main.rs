use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use icl_cli::commands::{self, resolve_out, EvalArgs};
use icl_cli::config::RunConfig;
use icl_core::verify::SuiteOptions;

#[derive(Parser)]
#[command(
    name = "icl",
    version,
    about = "Proxy-guided semi-supervised segmentation on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled, unlabeled and validation sample files.
    GenData {
        /// TOML run config supplying image size, classes, pool sizes and seed.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `data.n_labeled`.
        #[arg(long)]
        n_labeled: Option<usize>,
        /// Overrides `data.n_unlabeled`.
        #[arg(long)]
        n_unlabeled: Option<usize>,
        /// Overrides `data.n_val`.
        #[arg(long)]
        n_val: Option<usize>,
        /// Output directory [default: $ICL_OUT_DIR/data]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write metrics, checkpoints and the resolved config.
    Train {
        /// TOML run config; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory [default: $ICL_OUT_DIR/<mode>-seed<seed>]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Labeled data and the segmentation loss only.
        #[arg(long, conflicts_with = "sspa_only")]
        supervised_only: bool,
        /// Labeled data with the segmentation and proxy-adaptor losses.
        #[arg(long)]
        sspa_only: bool,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.max_iters`.
        #[arg(long)]
        max_iters: Option<u64>,
    },
    /// Evaluate a checkpoint's backbone on a sample directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of sample files, or a `gen-data` output (its `val/` is used).
        #[arg(long)]
        data: PathBuf,
        /// Output directory [default: $ICL_OUT_DIR/eval]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Run the oracle, gradient and invariant checks.
    Verify {
        /// Restrict to these groups (ops, gradients, attention, detach,
        /// losses, metrics, trainer, data).
        #[arg(long = "group")]
        groups: Vec<String>,
        /// Random seeds per gradient case.
        #[arg(long, default_value_t = SuiteOptions::default().grad_seeds)]
        grad_seeds: u64,
        /// Test fixture: negate the softmax backward rule.
        #[arg(long, hide = true)]
        inject_softmax_flip: bool,
    },
}

fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            config,
            seed,
            n_labeled,
            n_unlabeled,
            n_val,
            out,
        } => {
            let mut rc = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                rc.train.master_seed = s;
            }
            rc.n_labeled = n_labeled.unwrap_or(rc.n_labeled);
            rc.n_unlabeled = n_unlabeled.unwrap_or(rc.n_unlabeled);
            rc.n_val = n_val.unwrap_or(rc.n_val);
            commands::gen_data(&rc, &resolve_out(out, "data"))?;
        }
        Command::Train {
            config,
            out,
            supervised_only,
            sspa_only,
            seed,
            max_iters,
        } => {
            let mut rc = load_or_default(config.as_deref())?;
            if supervised_only {
                rc.supervised_only();
            }
            if sspa_only {
                rc.supervised_sspa();
            }
            if let Some(s) = seed {
                rc.train.master_seed = s;
            }
            if let Some(n) = max_iters {
                rc.train.max_iters = n;
            }
            let leaf = format!("{}-seed{}", rc.mode.name(), rc.train.master_seed);
            commands::train(&rc, &resolve_out(out, &leaf))?;
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            oracle,
        } => {
            commands::eval(&EvalArgs {
                checkpoint,
                data,
                out: resolve_out(out, "eval"),
                oracle,
            })?;
        }
        Command::Verify {
            groups,
            grad_seeds,
            inject_softmax_flip,
        } => {
            let opts = SuiteOptions {
                grad_seeds,
                flip_softmax_backward: inject_softmax_flip,
                ..Default::default()
            };
            return commands::verify(&groups, &opts);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
