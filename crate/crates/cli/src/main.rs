//! `regionnet` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use regionnet::ErrorKind;

use config::Config;

#[derive(Parser)]
#[command(name = "regionnet", version, about = "Region-based ensemble classifier pipeline")]
struct Cli {
    /// TOML run configuration; unspecified keys come from its preset.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set optimizer.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest the dataset and write it with a manifest.
    GenData {
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train the ensemble (and the heatmap detector when configured).
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Start over even if a checkpoint exists.
        #[arg(long)]
        force: bool,
    },
    /// Classification and detection reports on the test split.
    Eval,
    /// Detection AP/mAP with the configured post-processing mode.
    DetectEval,
    /// Combine the training log and evaluation reports.
    Report,
    /// Print the fully merged configuration.
    PrintConfig,
}

fn run(cli: Cli) -> regionnet::Result<()> {
    let cfg = Config::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData { force } => commands::gen_data(&cfg, force),
        Command::Train { resume, force } => commands::train(&cfg, resume, force),
        Command::Eval => commands::eval(&cfg),
        Command::DetectEval => commands::detect_eval(&cfg),
        Command::Report => commands::report(&cfg),
        Command::PrintConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
