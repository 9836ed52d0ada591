use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use metalabel::data::{save_dataset, Split};
use metalabel::gradcheck::{run_suite, GradcheckOptions};
use metalabel::harness::{
    evaluate, prepare_dataset, run_sweep, train_to_dir, Method, RunState, SweepConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "metalabel", version, about = "Meta-learned soft labels for noisy-label training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, split and corrupt a dataset and write it to a file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        unlabeled_fraction: Option<f64>,
    },
    /// Train one run into an output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        unlabeled_fraction: Option<f64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Train the plain cross-entropy baseline instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Finite-difference and cross-route gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides every relative tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, hide = true)]
        corrupt_analytic_route: bool,
    },
    /// Accuracy of a checkpoint's selected model on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        split: Split,
    },
    /// Run every cell of a sweep config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>, unlabeled: Option<f64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(f) = unlabeled {
        cfg.data.unlabeled_fraction = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Ok(false) means the command ran but reported failure.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out, seed, unlabeled_fraction } => {
            let cfg = load_config(&config, seed, unlabeled_fraction)?;
            let ds = prepare_dataset(&cfg)?;
            save_dataset(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} rows to {}", ds.len(), out.display());
        }
        Command::Train { config, out, seed, unlabeled_fraction, resume, baseline } => {
            let cfg = load_config(&config, seed, unlabeled_fraction)?;
            let method = if baseline { Method::CrossEntropy } else { Method::MetaLabelNet };
            let s = train_to_dir(&cfg, &out, method, resume)?;
            println!(
                "selected epoch {} meta accuracy {} test accuracy {}",
                s.selected_epoch, s.meta_accuracy, s.test_accuracy
            );
        }
        Command::Gradcheck { trials, seed, tolerance, corrupt_analytic_route } => {
            let opts = GradcheckOptions { trials, seed, tolerance, corrupt_similarity_route: corrupt_analytic_route };
            let report = run_suite(&opts)?;
            let mut ok = true;
            for r in &report {
                ok &= r.passed;
                println!(
                    "{:<24} worst {:.3e} (small abs {:.1e}) tol {:.0e} {}",
                    r.name,
                    r.worst_error,
                    r.worst_small_abs,
                    r.tolerance,
                    if r.passed { "PASS" } else { "FAIL" }
                );
            }
            return Ok(ok);
        }
        Command::Eval { checkpoint, dataset, split } => {
            let state = RunState::load(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let ds = metalabel::data::load_dataset(&dataset).with_context(|| format!("reading {}", dataset.display()))?;
            let best = state.best.context("checkpoint has no selected model")?;
            println!("{}", evaluate(&best.theta, &ds, split)?);
        }
        Command::Sweep { config, out, jobs } => {
            let sweep = SweepConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let done = run_sweep(&sweep, &out, jobs)?;
            println!("{} cells written to {}", done.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<metalabel::Error>().is_some_and(|m| m.is_validation()));
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
