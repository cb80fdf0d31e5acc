//! The `trace` command line: `generate`, `train`, `eval` and `infer`.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::Checkpoint;
pub use config::TraceConfig;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::Result;

#[derive(Parser, Debug)]
#[command(name = "trace", version, about = "Plume segmentation and flux classification on thermal clips")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 432)]
        clips: usize,
        #[arg(long, default_value_t = 12)]
        animals: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Replace an existing dataset in a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Run training stages and write a checkpoint after each one.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (or the threshold baseline) on one split.
    Eval {
        #[arg(long, required_unless_present = "baseline")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Seed of the baseline classifier.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Predict masks and the flux class of one clip directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    All,
    S1a,
    S1b,
    S2,
    S3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    PsiStats,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            out,
            clips,
            animals,
            seed,
            height,
            width,
            frames,
            force,
        } => commands::generate(&out, clips, animals, seed, (height, width, frames), force),
        Command::Train {
            config,
            data,
            stage,
            resume,
            out,
        } => commands::train(config.as_deref(), &data, stage, resume.as_deref(), &out),
        Command::Eval {
            ckpt,
            data,
            split,
            report,
            baseline,
            seed,
        } => commands::eval(ckpt.as_deref(), &data, split, &report, baseline, seed),
        Command::Infer { ckpt, clip, out } => commands::infer(&ckpt, &clip, &out),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
