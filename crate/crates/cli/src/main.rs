mod commands;
mod config;
mod errors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::errors::CliError;

#[derive(Parser)]
#[command(
    name = "strokedetect",
    version,
    about = "Temporal stroke detection in video: dataset synthesis, two-stream training, \
             sliding-window detection, evaluation, and annotation statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated dataset split into train/valid/test
    Synth {
        /// TOML or JSON run configuration; module defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory the split directories are written into
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the two-stream classifier and save the best checkpoint
    Train {
        /// TOML or JSON run configuration; module defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root holding train/ and valid/ video directories
        #[arg(long)]
        data_dir: PathBuf,
        /// Path the best-epoch checkpoint is written to
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch history CSV path (default: <checkpoint stem>_history.csv)
        #[arg(long)]
        history: Option<PathBuf>,
        /// Override the configured number of epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the configured training seed
        #[arg(long)]
        seed: Option<u64>,
        /// Keep batch order fixed instead of reshuffling every epoch
        #[arg(long)]
        no_shuffle: bool,
    },
    /// Detect strokes with a saved checkpoint and write detection JSON
    Detect {
        /// TOML or JSON run configuration; module defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint written by the train command
        #[arg(long)]
        checkpoint: PathBuf,
        /// One frame directory, or a directory of frame directories
        #[arg(long)]
        videos: PathBuf,
        /// Output detection JSON path
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detection JSON against ground truth annotations
    Eval {
        /// TOML or JSON run configuration; module defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Detection JSON from the detect command
        #[arg(long)]
        detections: PathBuf,
        /// Annotation file, video directory, or directory of video directories
        #[arg(long)]
        annotations: PathBuf,
        /// Output report JSON; PR and per-video IoU CSVs land beside it
        #[arg(long)]
        report: PathBuf,
    },
    /// Print the stroke statistics table for annotation files or directories
    Stats {
        /// TOML or JSON run configuration; accepted for uniformity, unused
        #[arg(long)]
        config: Option<PathBuf>,
        /// Annotation files, video directories, or split directories
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_thread_pool()?;
    match cli.command {
        Command::Synth { config, out_dir } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            commands::cmd_synth(&cfg, &out_dir)
        }
        Command::Train {
            config,
            data_dir,
            checkpoint,
            history,
            epochs,
            seed,
            no_shuffle,
        } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            if let Some(n) = epochs {
                cfg.train.epochs = n;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if no_shuffle {
                cfg.train.shuffle = false;
            }
            commands::cmd_train(&cfg, &data_dir, &checkpoint, history.as_deref())
        }
        Command::Detect {
            config,
            checkpoint,
            videos,
            out,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            commands::cmd_detect(&cfg, &checkpoint, &videos, &out)
        }
        Command::Eval {
            config,
            detections,
            annotations,
            report,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            commands::cmd_eval(&cfg, &detections, &annotations, &report)
        }
        Command::Stats { config, paths } => {
            RunConfig::load_or_default(config.as_deref())?;
            commands::cmd_stats(&paths)
        }
    }
}

/// Honors STROKEDETECT_THREADS as a cap on the worker pool. Results do not
/// depend on the thread count; only wall time does.
fn init_thread_pool() -> Result<(), CliError> {
    let Some(raw) = std::env::var_os("STROKEDETECT_THREADS") else {
        return Ok(());
    };
    let text = raw.to_str().ok_or_else(|| {
        CliError::Config("STROKEDETECT_THREADS is not valid UTF-8".into())
    })?;
    let threads: usize = text.trim().parse().map_err(|_| {
        CliError::Config(format!(
            "STROKEDETECT_THREADS must be a positive integer, got {text:?}"
        ))
    })?;
    if threads == 0 {
        return Err(CliError::Config(
            "STROKEDETECT_THREADS must be at least 1".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool setup failed: {e}")))
}
