//! Command-line front end: data generation, encoder pretraining, agent
//! training, evaluation and diagnostics.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{FilterSetting, RunConfig};
pub use manifest::RunManifest;
pub use pipeline::Agent;

/// A mistake in how the program was invoked; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "diffclone", version, about = "Diffusion-based behavior cloning on a toy pouring task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options every command accepts.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiagKind {
    Gradcheck,
    Schedule,
    Bimodal,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the scripted expert and write a trajectory file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
        /// Comma-separated noise scales cycled across episodes.
        #[arg(long)]
        noise_levels: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised encoder pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// moco, byol or delta.
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent on a trajectory file.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        agent: Agent,
        #[arg(long)]
        data: PathBuf,
        /// `identity` or a pretrained encoder checkpoint.
        #[arg(long)]
        encoder: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a trained agent in the simulator.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the noiseless scripted expert instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        expert: bool,
        #[arg(long)]
        episodes: Option<usize>,
        /// Worker threads for evaluation episodes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Per-episode CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a self-check and report pass or fail.
    Diag {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        which: DiagKind,
        /// Diffusion timesteps for the schedule check.
        #[arg(long = "T")]
        steps: Option<usize>,
        /// Random parameter points per network for the gradient check.
        #[arg(long, default_value_t = 3)]
        points: usize,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
pub fn resolve_config(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    for a in &common.set {
        cfg.merge_assignment(a)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `DIFFCLONE_LOG` (quiet, info or debug; unset means warnings only).
pub fn init_logging() -> Result<()> {
    let level = match std::env::var("DIFFCLONE_LOG").as_deref() {
        Err(_) => log::LevelFilter::Warn,
        Ok("quiet") => log::LevelFilter::Off,
        Ok("info") => log::LevelFilter::Info,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => return Err(UsageError(format!("DIFFCLONE_LOG must be quiet, info or debug, got '{other}'")).into()),
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    Ok(())
}

/// 2 for invocation mistakes, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(diffclone_core::Error::Usage(_) | diffclone_core::Error::Config(_)) = cause.downcast_ref() {
            return EXIT_USAGE;
        }
    }
    EXIT_RUNTIME
}

pub fn run(cli: &Cli) -> Result<()> {
    commands::dispatch(&cli.command)
}
