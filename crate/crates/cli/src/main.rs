//! `alzhinet`: train, evaluate and stress-test hybrid 2D/3D classifiers.
//!
//! Exit codes: 0 ok, 2 configuration, 3 data or IO, 4 checkpoint,
//! 5 verification failure.

mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{GradcheckOptions, Head, SplitChoice};
use config::RunConfig;
use fail::Fail;

#[derive(Parser)]
#[command(name = "alzhinet", version, about = "Hybrid 2D/3D CNN training and robustness tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a hybrid (or 2D-only) model and save the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also save both networks to hybrid.azwt.
        #[arg(long)]
        save_hybrid: bool,
    },
    /// Score one checkpoint on a data split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "2d")]
        head: Head,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
    },
    /// Run the corruption sweep over one or more checkpoints.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "2d")]
        head: Head,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
        /// Comma-separated family names or unique prefixes.
        #[arg(long, value_delimiter = ',')]
        families: Option<Vec<String>>,
    },
    /// Write the augmented slices of one image's volume.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        image: PathBuf,
    },
    /// Finite-difference check of every primitive and of the combined loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Pass mark for primitives.
        #[arg(long, default_value_t = 1e-6)]
        threshold: f64,
        /// Pass mark for the end-to-end combined loss.
        #[arg(long, default_value_t = 1e-4)]
        combined_threshold: f64,
        /// Randomized draws per primitive.
        #[arg(long, default_value_t = 100)]
        trials: u64,
        /// Parameters probed in the end-to-end check.
        #[arg(long, default_value_t = 50)]
        coordinates: usize,
    },
    /// Write the configured synthetic dataset as an image tree.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, families: Option<Vec<String>>) -> Result<RunConfig, Fail> {
    let cfg = match &common.config {
        Some(path) => config::read(path)?,
        None => RunConfig::default(),
    };
    cfg.resolve(common.seed, common.output.clone(), families)
}

fn init_threads() -> Result<(), Fail> {
    let Ok(v) = std::env::var("ALZHINET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail::config(format!("ALZHINET_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Fail::new(1, e.to_string()))
}

fn run(cli: Cli) -> Result<(), Fail> {
    init_threads()?;
    match cli.command {
        Command::Train { common, save_hybrid } => commands::train(&resolve(&common, None)?, save_hybrid),
        Command::Eval { common, checkpoint, head, split } => {
            commands::eval(&resolve(&common, None)?, &checkpoint, head, split)
        }
        Command::Perturb { common, checkpoints, head, split, families } => {
            commands::perturb(&resolve(&common, families)?, &checkpoints, head, split)
        }
        Command::AugmentPreview { common, image } => commands::augment_preview(&resolve(&common, None)?, &image),
        Command::Gradcheck { common, threshold, combined_threshold, trials, coordinates } => {
            let opts = GradcheckOptions { threshold, combined_threshold, trials, coordinates };
            commands::gradcheck(&resolve(&common, None)?, &opts)
        }
        Command::Synth { common } => commands::synth(&resolve(&common, None)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
