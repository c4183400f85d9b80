mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "pixeldyn", version, about = "Unsupervised multi-object dynamics from binary image sequences")]
struct Cli {
    /// Worker threads (default: number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory.
    #[arg(long, env = "PIXELDYN_OUT")]
    out: PathBuf,
    /// Configuration file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: desk32 or full48.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate training and test corpora.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the model on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training corpus.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Write figures for this many sequences.
        #[arg(long, default_value_t = 6)]
        figures: usize,
    },
    /// Train and evaluate the encoder-decoder LSTM baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Held-out corpus for the generation report.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
pub enum Task {
    Infer,
    Generate,
    Interpolate,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Generate { common } => commands::generate(&common),
        Command::Train { common, dataset, iterations, batch, checkpoint } => {
            commands::train(&common, &dataset, iterations, batch, checkpoint.as_deref())
        }
        Command::Eval { common, task, checkpoint, dataset, figures } => {
            commands::eval(&common, task, &checkpoint, &dataset, figures)
        }
        Command::Baseline { common, dataset, test, iterations, batch, checkpoint } => {
            commands::baseline(&common, &dataset, test.as_deref(), iterations, batch, checkpoint.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
