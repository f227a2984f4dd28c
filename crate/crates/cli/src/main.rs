//! `menglan`: ingest sensor logs, train, evaluate, sweep activations, benchmark.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use menglan::data::{SplitPart, TargetGas};
use menglan::Error;

use commands::{Ablation, BenchArgs, EvalArgs, IngestArgs, SweepArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "menglan", version, about = "Gas-concentration regression on e-nose sensor arrays")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw sensor file into a standardized window archive.
    Ingest {
        raw: PathBuf,
        out: PathBuf,
        /// Window width in records.
        #[arg(long, default_value_t = 100)]
        width: usize,
        #[arg(long, default_value_t = 50)]
        stride: usize,
        /// Maximum windows per concentration level.
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long, default_value = "ethylene")]
        target: TargetGas,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Split in sample order instead of shuffling.
        #[arg(long)]
        chronological: bool,
    },
    /// Train one model and write checkpoint, epoch log, metrics and manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated: no-frm, no-hmha.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<Ablation>,
    },
    /// Metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitPart,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per activation and compare.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated target gases; defaults to the config target.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<TargetGas>,
    },
    /// Batch-size-1 inference latency.
    Bench {
        #[arg(long, conflicts_with = "presets")]
        checkpoint: Option<PathBuf>,
        /// Benchmark the small, medium and large presets.
        #[arg(long)]
        presets: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitPart,
        /// Number of windows to time.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        Error::Config(_) | Error::Dimension { .. } | Error::Contract(_) => 3,
        Error::Format(_) | Error::Parse { .. } => 4,
        Error::Divergence(_) => 5,
    }
}

fn run(cmd: Command) -> menglan::Result<String> {
    match cmd {
        Command::Ingest {
            raw,
            out,
            width,
            stride,
            cap,
            target,
            seed,
            chronological,
        } => commands::ingest(&IngestArgs {
            raw,
            out,
            width,
            stride,
            cap,
            target,
            seed,
            chronological,
        }),
        Command::Train {
            config,
            archive,
            out,
            ablate,
        } => commands::train_cmd(&TrainArgs {
            config,
            archive,
            out,
            ablate,
        }),
        Command::Eval {
            checkpoint,
            archive,
            split,
            out,
        } => commands::eval(&EvalArgs {
            checkpoint,
            archive,
            split,
            out,
        }),
        Command::Sweep {
            config,
            archive,
            out,
            targets,
        } => commands::sweep(&SweepArgs {
            config,
            archive,
            out,
            targets,
        }),
        Command::Bench {
            checkpoint,
            presets,
            config,
            archive,
            split,
            samples,
            repeats,
            out,
        } => commands::bench(&BenchArgs {
            checkpoint,
            presets,
            config,
            archive,
            split,
            samples,
            repeats,
            out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
