//! `anatcl`: file-driven runs of the anatcl pipeline.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad config, bad
//! input files), 2 runtime error (training/probing/writing failed after
//! inputs validated). All diagnostics go to stderr; only `gradcheck`
//! reports on stdout.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod commands;
mod config;

/// An error with the exit code it should produce.
#[derive(Debug)]
pub struct CliError {
    message: String,
    exit: u8,
}

impl CliError {
    /// The invocation or its inputs are invalid; nothing was attempted.
    pub fn validation(message: impl ToString) -> Self {
        Self {
            message: message.to_string(),
            exit: 1,
        }
    }

    /// Inputs validated but the work itself failed.
    pub fn runtime(message: impl ToString) -> Self {
        Self {
            message: message.to_string(),
            exit: 2,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "anatcl",
    version,
    about = "Synthetic brain-morphometry cohorts, contrastive pretraining, and frozen-encoder probes",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort directory (subjects, features, ROI table).
    Synth {
        /// `key = value` config file; omit for all defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the cohort.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain an encoder on a cohort; writes checkpoint + loss trace.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cohort directory produced by `synth` (or hand-assembled CSVs).
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write frozen-encoder representations for every subject.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated linear probe of a frozen encoder on one task.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        /// Target column: `age`, `sex`, or a generated label name.
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the fold-shuffling seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every loss variant; prints max errors.
    Gradcheck {
        /// Seed for the synthetic harness batch.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-measure ridge study of age information; writes a CSV table.
    FeatureStudy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the fold-shuffling seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { config, out, seed } => commands::synth(config.as_deref(), &out, seed),
        Command::Pretrain {
            config,
            cohort,
            out,
            seed,
        } => commands::pretrain(config.as_deref(), &cohort, &out, seed),
        Command::Embed {
            checkpoint,
            cohort,
            out,
        } => commands::embed(&checkpoint, &cohort, &out),
        Command::Probe {
            config,
            checkpoint,
            cohort,
            task,
            out,
            seed,
        } => commands::probe(config.as_deref(), &checkpoint, &cohort, &task, &out, seed),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::FeatureStudy {
            config,
            cohort,
            out,
            seed,
        } => commands::feature_study(config.as_deref(), &cohort, &out, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = err.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", err);
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit)
        }
    }
}
