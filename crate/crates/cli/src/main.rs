//! `akt` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use akt_core::AktError;
use clap::{Parser, Subcommand};

use crate::commands::SynthArgs;
use crate::config::ConfigArgs;

#[derive(Parser, Debug)]
#[command(name = "akt", version, about = "Attentive knowledge tracing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, filter and index a response log; report dataset statistics
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "generic")]
        profile: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one fold with early stopping; writes a checkpoint and run record
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// k-fold cross-validation
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Cross-validate several variants under identical settings
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Comma-separated variants (default: all six)
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a simulated corpus with ground truth
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        spec: SynthArgs,
    },
    /// Dump per-head attention weights of one learner
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "generic")]
        profile: String,
        #[arg(long)]
        learner: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write learned question difficulties as CSV
    ExportDifficulty {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference check of the full model gradient on a tiny instance
    GradCheck {
        #[arg(long, default_value = "akt-r")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare { input, profile, output } => commands::prepare(&input, &profile, &output),
        Command::Train { data, output, config } => commands::train(&data, &config, &output),
        Command::Cv { data, output, config } => commands::cv(&data, &config, &output),
        Command::Ablate { data, output, variants, config } => commands::ablate(&data, &variants, &config, &output),
        Command::Synth { output, spec } => commands::synth(&spec, &output),
        Command::ExportAttention { checkpoint, data, profile, learner, output } => {
            commands::export_attention(&checkpoint, &data, &profile, &learner, &output)
        }
        Command::ExportDifficulty { checkpoint, output } => commands::export_difficulty(&checkpoint, &output),
        Command::GradCheck { variant, seed, epsilon, tolerance } => commands::grad_check(&variant, seed, epsilon, tolerance),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<AktError>() {
            return match e {
                AktError::Config(_) => 1,
                AktError::Numerical(_) | AktError::Metric(_) | AktError::Shape { .. } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
