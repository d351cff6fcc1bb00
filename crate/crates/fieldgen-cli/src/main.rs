//! `fieldgen`: dataset generation, training, sampling, and evaluation from
//! one JSON config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. `FIELDGEN_THREADS` caps the worker pool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fieldgen_core::train::{
    configure_threads, eval_command, generate_dataset, run_training, sample_command, RunConfig,
};
use fieldgen_core::FieldgenError;

#[derive(Parser)]
#[command(name = "fieldgen", version, about = "Sketch-conditioned steady-state field generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the command's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the FDTD oracle over randomized source geometries and write the
    /// dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the VAE, conditional prior, and diffusion transformer.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from a checkpoint (config digest must match).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one field image from a source sketch.
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Score the held-out split and write metric CSVs.
    Eval {
        #[command(flatten)]
        common: Common,
    },
}

fn thread_limit() -> Option<usize> {
    std::env::var("FIELDGEN_THREADS").ok().and_then(|v| v.parse().ok())
}

fn run() -> Result<(), FieldgenError> {
    configure_threads(thread_limit());
    match Cli::parse().command {
        Command::GenData { common } => {
            let mut cfg = RunConfig::from_path(&common.config)?;
            if let Some(seed) = common.seed {
                cfg.dataset.seed = seed;
            }
            let out = common.out.unwrap_or_else(|| cfg.dataset.dir.clone());
            let manifest = generate_dataset(&cfg, &out)?;
            println!(
                "wrote {} samples ({} train / {} held out) to {}",
                manifest.sample_count,
                manifest.train_entries().count(),
                manifest.heldout_entries().count(),
                out.display()
            );
        }
        Command::Train { common, resume } => {
            let mut cfg = RunConfig::from_path(&common.config)?;
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            let out = common.out.unwrap_or_else(|| PathBuf::from("runs/train"));
            let outcome = run_training(&cfg, &cfg.dataset.dir.clone(), &out, resume.as_deref())?;
            println!(
                "trained {} VAE + {} diffusion epochs; checkpoint {}; metrics {}",
                outcome.vae_epochs_done,
                outcome.epochs_done,
                outcome.final_checkpoint.display(),
                outcome.metrics_csv.display()
            );
        }
        Command::Sample { common } => {
            let mut cfg = RunConfig::from_path(&common.config)?;
            if let Some(seed) = common.seed {
                cfg.sample.sampler.seed = seed;
            }
            let out = common.out.unwrap_or_else(|| PathBuf::from("runs/sample"));
            let outcome = sample_command(&cfg, &out)?;
            println!(
                "wrote {} (sha256 {}) and {}",
                outcome.image_path.display(),
                outcome.image_sha256,
                outcome.sidecar_path.display()
            );
        }
        Command::Eval { common } => {
            let mut cfg = RunConfig::from_path(&common.config)?;
            if let Some(seed) = common.seed {
                cfg.eval.seed = seed;
            }
            let out = common.out.unwrap_or_else(|| PathBuf::from("runs/eval"));
            let report = eval_command(&cfg, &out)?;
            for (name, mean, std, n) in report.aggregates() {
                println!("{name}: {mean:.4} +- {std:.4} (n = {n})");
            }
            println!("reports in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
