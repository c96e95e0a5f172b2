//! Command-line front end: `train`, `density`, `sample`, `eval-ood`, `check`.

pub mod check;
pub mod checkpoint;
mod commands;
pub mod config;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use commands::{
    cmd_density, cmd_eval_ood, cmd_sample, cmd_train, read_matrix_csv, write_matrix_csv, OodResult, SampleMode,
    TrainOutcome, FINAL_CHECKPOINT, TRACE_FILE,
};
pub use config::{ExperimentConfig, ExperimentData};

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "nae", version, about = "Normalized autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config, or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid density CSV, heat map and metrics of a 2-D model.
    Density {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate samples at one pipeline stage.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, value_enum, default_value_t = SampleMode::Full)]
        mode: SampleMode,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Outlier-detection AUC of reconstruction-error scores.
    EvalOod {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Inlier rows as CSV (requires --outliers).
        #[arg(long)]
        inliers: Option<PathBuf>,
        #[arg(long)]
        outliers: Option<PathBuf>,
        /// Size of generated evaluation sets.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle suites.
    Check {
        /// Corrupt the sigmoid derivative to confirm the suite catches it.
        #[cfg(feature = "fault-injection")]
        #[arg(long)]
        inject_fault: bool,
    },
}

/// Runs a parsed command, printing results to stdout. Returns the process
/// exit code for failures that are not errors (failed checks).
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let o = cmd_train(config.as_deref(), checkpoint.as_deref(), seed, out.as_deref())?;
            println!("trained {} epochs; final checkpoint {}", o.epochs.len(), o.final_checkpoint.display());
        }
        Command::Density {
            checkpoint,
            resolution,
            out,
        } => {
            let m = cmd_density(&checkpoint, resolution, out.as_deref())?;
            println!("heldout_avg_loglik {}", m.heldout_avg_loglik);
            println!("grid_kl {}", m.grid_kl);
            println!("spurious_mass {}", m.spurious_mass);
        }
        Command::Sample {
            checkpoint,
            n,
            mode,
            seed,
            out,
        } => {
            let x = cmd_sample(&checkpoint, n, mode, seed, out.as_deref())?;
            println!("wrote {} {} samples", x.rows(), mode.name());
        }
        Command::EvalOod {
            checkpoint,
            inliers,
            outliers,
            n,
            seed,
            out,
        } => {
            for r in cmd_eval_ood(&checkpoint, inliers.as_deref(), outliers.as_deref(), n, seed, out.as_deref())? {
                println!("{} auc {:.4} ({} inliers, {} outliers)", r.outlier_set, r.auc, r.n_inliers, r.n_outliers);
            }
        }
        Command::Check {
            #[cfg(feature = "fault-injection")]
            inject_fault,
        } => {
            #[cfg(feature = "fault-injection")]
            crate::diff::set_sigmoid_fault(inject_fault);
            let outcomes = check::run_all();
            let mut failed = 0;
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                failed += usize::from(!o.passed);
            }
            if failed > 0 {
                eprintln!("{failed} of {} suites failed", outcomes.len());
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// Exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse(_) => 2,
        _ => 1,
    }
}
