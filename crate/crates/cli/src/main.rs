//! `prunelab` — train small CNNs, prune their channels under different
//! saliency metrics (or the sensitivity-oracle composite), and summarize
//! accuracy-versus-sparsity results across seeds.
//!
//! Exit codes: 0 success, 2 usage error, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prunelab_core::harness::{self, ExperimentConfig};
use prunelab_core::Error;

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Channel-pruning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured network and write a checkpoint + training log.
    Train {
        /// Experiment config file (flat key = value format).
        #[arg(long)]
        config: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a checkpoint with one metric; one trajectory CSV per seed.
    Prune {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// mean-sq-weights | mean-activations | avg-gradients | taylor1 |
        /// fisher2 | composite
        #[arg(long)]
        metric: String,
        /// Oracle width (composite only).
        #[arg(long)]
        k: Option<usize>,
        /// Stop once test accuracy drops this far below the initial value.
        #[arg(long = "max-acc-drop")]
        max_acc_drop: Option<f64>,
        /// Run a single validation-sample seed instead of the configured
        /// replications.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize trajectory CSVs: mean and 95% CI of conv weights removed
    /// at a given accuracy drop, per metric and oracle width.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding trajectory CSVs from `prune`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Accuracy-drop budget for the summary.
        #[arg(long, default_value_t = 0.05)]
        drop: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn load(config: &PathBuf) -> Result<ExperimentConfig, Error> {
    harness::load_config(config)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load(&config)?;
            let outcome = harness::cmd_train(&cfg, seed, &out)?;
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("train log:  {}", outcome.log.display());
            println!("final test accuracy: {:.4}", outcome.final_test_acc);
            Ok(())
        }
        Command::Prune {
            config,
            checkpoint,
            metric,
            k,
            max_acc_drop,
            seed,
            out,
        } => {
            let cfg = load(&config)?;
            let outcome =
                harness::cmd_prune(&cfg, &checkpoint, &metric, k, max_acc_drop, seed, &out)?;
            for path in &outcome.trajectories {
                println!("trajectory: {}", path.display());
            }
            for path in &outcome.audits {
                println!("audit log:  {}", path.display());
            }
            Ok(())
        }
        Command::Compare {
            config,
            input,
            drop,
            out,
        } => {
            let cfg = load(&config)?;
            let outcome = harness::cmd_compare(&cfg, &input, drop, &out)?;
            let table = std::fs::read_to_string(&outcome.table)?;
            print!("{table}");
            for row in &outcome.rows {
                if row.ci_half_width.is_none() {
                    println!(
                        "note: {} (k={}) has a single run; interval omitted",
                        row.metric, row.k
                    );
                }
            }
            println!("summary: {}", outcome.csv.display());
            Ok(())
        }
    }
}
