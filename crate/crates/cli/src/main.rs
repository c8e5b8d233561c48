//! `nesdf`: run, evaluate and ablate neural ESDF mapping from a TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::error;
use neural_esdf::app::{self, Ablation, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "nesdf", version, about = "Continual neural ESDF mapping from posed depth frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train and evaluate in 64-bit floats.
    #[arg(long = "f64")]
    f64: bool,
    /// Override the checkpoint interval, in frames.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        cfg.apply_overrides(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            f64: self.f64,
            checkpoint_every: self.checkpoint_every,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured frame stream and write all artifacts.
    Run(Common),
    /// Recompute the metrics of a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file written by `run`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the base config and one ablation side by side.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// random-sampling, no-current-grids or no-history-grids.
        #[arg(long)]
        ablation: String,
    },
    /// Render the synthetic source into a dataset directory.
    RenderDataset(Common),
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let summary = app::run(&common.load()?)?;
            println!(
                "{} frames ({} skipped), {} checkpoints",
                summary.frames,
                summary.skipped_frames,
                summary.checkpoints.len()
            );
            if let Some(m) = summary.final_metrics() {
                println!("{}", serde_json::to_string_pretty(m)?);
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let report = app::eval(&cfg, &checkpoint, cfg.out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { common, ablation } => {
            let ablation: Ablation = ablation.parse()?;
            let report = app::ablate(&common.load()?, ablation)?;
            println!("{:>10} {:>14} {:>14}", "frames", "base [m]", ablation.name());
            for (b, a) in report.base.iter().zip(&report.ablated) {
                println!("{:>10} {:>14.5} {:>14.5}", b.checkpoint, b.sdf_error_m, a.sdf_error_m);
            }
        }
        Command::RenderDataset(common) => {
            let n = app::render_dataset(&common.load()?)?;
            println!("{n} frames written");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
