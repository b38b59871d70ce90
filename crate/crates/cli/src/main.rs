mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "wmpolicy", about = "World-model locomotion policy experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. --override env.mass=8.74
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory override.
    #[arg(long)]
    out: Option<String>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scripted-gait reference clip as JSON.
    GenRef {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.9)]
        speed: f64,
        #[arg(long, default_value_t = 0.0)]
        turn: f64,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long)]
        out_file: PathBuf,
    },
    /// Co-train the world model and the tracking policy from scratch.
    TrainMt {
        #[command(flatten)]
        common: Common,
    },
    /// Train the command-following encoder on top of a tracking checkpoint.
    TrainCf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Online fine-tuning against (perturbed) physics along a path.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Off-policy fine-tuning from stored buffers; no environment steps.
    OffpolicyFinetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Buffer JSON files (repeatable).
        #[arg(long)]
        buffers: Vec<PathBuf>,
    },
    /// Roll out a checkpoint along a path and report tracking metrics.
    EvalPath {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Path kind shortcut (overrides config).
        #[arg(long)]
        path: Option<String>,
        /// Target speed shortcut (overrides config).
        #[arg(long)]
        speed: Option<f64>,
    },
    /// Finite-difference verification of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Named experiment bundles (fig3a, fig3c-env2/3/4, fig3d-analog,
    /// table2-analog, table4-analog).
    Repro {
        bundle: String,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenRef { common, speed, turn, duration, out_file } => {
            let cfg = common.load().map_err(config_err)?;
            runner::run_gen_ref(&cfg, speed, turn, duration, &out_file)
        }
        Command::TrainMt { common } => {
            let cfg = common.load().map_err(config_err)?;
            runner::run_train_mt(&cfg)
        }
        Command::TrainCf { common, checkpoint } => {
            let mut cfg = common.load().map_err(config_err)?;
            let ck = resolve_checkpoint(&mut cfg, checkpoint)?;
            runner::run_train_cf(&cfg, &ck)
        }
        Command::Finetune { common, checkpoint } => {
            let mut cfg = common.load().map_err(config_err)?;
            let ck = resolve_checkpoint(&mut cfg, checkpoint)?;
            runner::run_finetune(&cfg, &ck)
        }
        Command::OffpolicyFinetune { common, checkpoint, buffers } => {
            let mut cfg = common.load().map_err(config_err)?;
            let ck = resolve_checkpoint(&mut cfg, checkpoint)?;
            if !buffers.is_empty() {
                cfg.buffers = buffers.iter().map(|b| b.display().to_string()).collect();
            }
            let buffer_paths: Vec<PathBuf> = cfg.buffers.iter().map(PathBuf::from).collect();
            runner::run_offpolicy(&cfg, &ck, &buffer_paths)
        }
        Command::EvalPath { common, checkpoint, path, speed } => {
            let mut cfg = common.load().map_err(config_err)?;
            let ck = resolve_checkpoint(&mut cfg, checkpoint)?;
            let _ = &ck;
            if let Some(p) = path {
                cfg.path.kind = p.parse().map_err(|e| config_error(anyhow::Error::new(e)))?;
            }
            if let Some(s) = speed {
                cfg.path.speed = s;
            }
            runner::run_eval_path(&cfg, &ck)
        }
        Command::Gradcheck { seed } => runner::run_gradcheck(seed),
        Command::Repro { bundle, common, checkpoint } => {
            let cfg = common.load().map_err(config_err)?;
            runner::run_repro(&cfg, &bundle, checkpoint.as_deref())
        }
    }
}

/// Marker wrapper distinguishing configuration errors (exit 2) from runtime
/// failures (exit 1).
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(ConfigError(e))
}

/// The CLI flag wins over the config field; whichever is used lands in the
/// materialized config.
fn resolve_checkpoint(
    cfg: &mut RunConfig,
    flag: Option<PathBuf>,
) -> anyhow::Result<PathBuf> {
    if let Some(p) = flag {
        cfg.checkpoint = Some(p.display().to_string());
        return Ok(p);
    }
    match &cfg.checkpoint {
        Some(p) => Ok(PathBuf::from(p)),
        None => Err(config_err(anyhow::anyhow!(
            "this command needs --checkpoint or a `checkpoint` config field"
        ))),
    }
}

fn config_error(e: anyhow::Error) -> anyhow::Error {
    config_err(e)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
