//! `maskplan`: world generation, training, planning and evaluation.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskplan_core::mask::MaskKind;

#[derive(Parser, Debug)]
#[command(name = "maskplan", version, about = "Task-masked diffusion procedure planning")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand. Those that do not apply are ignored.
#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for all randomness; overrides a `seed` key in --config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Key-value config file (`key = value`, `#` comments).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Primary output path (a directory for `ablate`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sampling and evaluation.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Plan horizon.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(3..=6))]
    pub horizon: Option<u64>,
    #[arg(long, global = true, value_parser = parse_mask)]
    pub mask: Option<MaskKind>,
    #[arg(long, global = true, value_parser = ["ddpm", "ddim", "det", "deterministic", "noise"])]
    pub sampler: Option<String>,
    /// DDIM step count; defaults to a fifth of the diffusion steps.
    #[arg(long, global = true)]
    pub ddim_steps: Option<usize>,
    /// DDIM stochasticity; defaults to 1.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
}

fn parse_mask(s: &str) -> Result<MaskKind, String> {
    s.parse().map_err(|e: maskplan_core::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic world and write it as JSON.
    GenWorld,
    /// Sample videos from a world and cut them into plan instances (JSONL).
    GenData {
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value_t = 1786)]
        videos: usize,
        #[arg(long, default_value = "sliding", value_parser = ["sliding", "sliding_window", "one_per_video"])]
        protocol: String,
        /// Video-level train fraction; `none` leaves instances untagged.
        #[arg(long, default_value = "0.7")]
        split: String,
    },
    /// Train the task classifier on the train split.
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long, value_parser = ["mlp", "transformer"])]
        kind: Option<String>,
        /// Zero the caption channels.
        #[arg(long)]
        no_text: bool,
    },
    /// Train the masked diffusion denoiser on the train split.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        world: PathBuf,
        /// Loss curve CSV; defaults to `<out>.curve.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Sample plans for a dataset (JSONL, one record per sample).
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Task classifier; ground-truth tasks are used without one.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Samples per instance.
        #[arg(long, default_value_t = 1)]
        samples: u64,
        #[arg(long, default_value = "test", value_parser = ["train", "test", "all"])]
        split: String,
        #[arg(long, default_value_t = 256)]
        batch: usize,
    },
    /// Score sampled plans against ground truth.
    Eval {
        #[arg(long)]
        plans: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write a one-row metrics table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare mask kinds across seeds and world sizes.
    Ablate,
    /// Print a checkpoint's header.
    InspectCheckpoint { path: PathBuf },
}

/// Errors the user can fix by changing the invocation.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MASKPLAN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Causes whose text already ends the previous message are skipped.
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.ends_with(&c) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {msg}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
