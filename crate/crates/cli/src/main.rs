//! `quadmimic`: clip synthesis, retargeting, two-stage training, evaluation
//! and gait reports. Exit codes: 0 success, 2 usage or validation, 3 numeric
//! failure, 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{message}; diagnostics written to {}", dump.display())]
    Numeric { message: String, dump: PathBuf },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric { .. } => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "quadmimic", version, about = "Quadruped motion imitation and terrain adaptation")]
pub struct Cli {
    /// TOML run config; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: paths.out, else quadmimic-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed [default: config seed, else QUADMIMIC_SEED, else 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a trot clip, its contact dump and a dataset manifest.
    Synth(SynthArgs),
    /// Retarget a keypoint file onto the robot.
    Retarget(RetargetArgs),
    /// Run a training stage.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Mean ± std episode return per terrain for a stage-two checkpoint.
    Eval(EvalArgs),
    /// Gait statistics from a trajectory dump.
    Gait(GaitArgs),
    /// Clip seconds per (terrain, gait) over a dataset directory.
    Manifest(ManifestArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "walk")]
    pub gait: String,
    #[arg(long, default_value = "plane")]
    pub terrain: String,
    /// Forward speed, m/s.
    #[arg(long, default_value_t = 0.5)]
    pub speed: f64,
    #[arg(long, default_value_t = 2.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 0.64)]
    pub cycle_time: f64,
    /// Stance fraction of the cycle.
    #[arg(long, default_value_t = 0.594)]
    pub duty_factor: f64,
    #[arg(long, default_value_t = 50)]
    pub fps: u32,
    /// Output file stem [default: <gait>_<terrain>].
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct RetargetArgs {
    /// Keypoint file: `fps=<n>` header then 27 floats per frame.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    /// Base lowering, m.
    #[arg(long, default_value_t = quadmimic_core::retarget::DEFAULT_BASE_HEIGHT_DROP)]
    pub base_height_drop: f64,
    /// Outward toe shift, m.
    #[arg(long, default_value_t = quadmimic_core::retarget::DEFAULT_LEG_WIDEN)]
    pub leg_widen: f64,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Stage one: clip tracking.
    Imitate(ImitateArgs),
    /// Stage two: frozen decoder, terrain curricula.
    Adapt(AdaptArgs),
}

#[derive(Debug, Args)]
pub struct ImitateArgs {
    /// Clip files [default: every .clip in paths.dataset, else one synthetic 2 s walk].
    #[arg(long, num_args = 1..)]
    pub clips: Vec<PathBuf>,
    /// PPO updates [default: trainer.max_updates].
    #[arg(long)]
    pub updates: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Stage-one checkpoint [default: paths.checkpoint].
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Stage-two checkpoint to continue.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub updates: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated terrain kinds.
    #[arg(long, value_delimiter = ',', default_value = "plane,slopeup,slopedown,stairup,stairdown,blocks,hills")]
    pub terrains: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    /// Also record one episode on the first terrain to `eval.traj`.
    #[arg(long)]
    pub record: bool,
    /// Method label in the return table [default: checkpoint file stem].
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct GaitArgs {
    #[arg(long)]
    pub dump: PathBuf,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    /// Dataset directory [default: paths.dataset].
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

fn main() -> ExitCode {
    let help = format!("Config file defaults (TOML; unknown keys are rejected):\n\n{}", config::RunConfig::defaults_toml());
    let matches = match Cli::command().after_long_help(help).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
