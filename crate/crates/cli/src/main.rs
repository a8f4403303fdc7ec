//! `ptdt`: generate data, pretrain, tune prompts, evaluate, run ablations
//! and serve human ranking sessions.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ptdt_core::envs::{Family, Quality};
use ptdt_core::eval::ablate::AblationKind;

use config::{ConfigError, OracleKind};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "ptdt", version, about = "Prompt-tuned decision transformers on point-mass tasks")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; every stage derives its own seeds from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print a machine-readable summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Output directory (default `runs/<timestamp>-<name>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run name used in the default output directory.
    #[arg(long, global = true)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct Source {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Position of the target task in the held-out split.
    #[arg(long)]
    pub task: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate offline datasets for a train/held-out task split.
    GenData {
        #[arg(long, value_parser = parse_family)]
        family: Option<Family>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Multi-task pretraining on the training tasks.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Prompt length the model is trained with.
        #[arg(long)]
        kstar: Option<usize>,
    },
    /// Tune the prompt of a frozen checkpoint on a held-out task.
    Tune {
        #[command(flatten)]
        src: Source,
        #[arg(long, value_enum)]
        oracle: Option<OracleKind>,
        #[arg(long, value_parser = parse_quality)]
        prompt_init: Option<Quality>,
        /// Window budget of the target-task samples.
        #[arg(long)]
        samples: Option<usize>,
        /// Expected prompt length; must match the checkpoint.
        #[arg(long)]
        kstar: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Fine-tune every parameter on the target-task samples.
    FinetuneFull {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_parser = parse_quality)]
        prompt_init: Option<Quality>,
    },
    /// Evaluate a checkpoint and prompt on a held-out task.
    Eval {
        #[command(flatten)]
        src: Source,
        /// Prompt JSON (as written by `tune`); sampled from the data otherwise.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long, value_parser = parse_quality)]
        prompt_init: Option<Quality>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Ablation sweeps; one result row per method, setting and seed.
    Ablate {
        #[arg(long)]
        kind: Option<AblationKind>,
        /// Repeat for the prompt-length sweep.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run the ranking service for a human-ranked tuning session.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        session_dir: Option<PathBuf>,
        #[arg(long)]
        reveal_returns: bool,
        /// Built UI bundle to serve at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Needed only to start a new session.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        task: Option<usize>,
        #[arg(long, value_parser = parse_quality)]
        prompt_init: Option<Quality>,
    },
    /// Render SVG charts from traces, result rows or training logs.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn parse_family(s: &str) -> Result<Family, String> {
    match s {
        "dir" => Ok(Family::PointDir2d),
        "vel" => Ok(Family::PointVel1d),
        "reach" => Ok(Family::PointReach2d),
        _ => serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| format!("unknown family {s:?} (point-dir-2d, point-vel-1d, point-reach-2d)")),
    }
}

fn parse_quality(s: &str) -> Result<Quality, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown quality {s:?} (expert, medium, random)"))
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: invalid configuration: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            let report = serde_json::json!({
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{report}");
            ExitCode::from(1)
        }
    }
}
