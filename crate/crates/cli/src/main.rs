use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stq_core::dataio::Split;

mod commands;
mod config;

use config::DatasetName;

#[derive(Parser)]
#[command(name = "stq", version, about = "Adaptive binary/ternary quantization-aware training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a packed model file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, value_enum)]
        dataset: Option<DatasetName>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Write histograms and the per-layer summary of a finished run.
    Report { run_dir: PathBuf },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: stq_core::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            data_dir,
            out_dir,
            seed,
        } => commands::train(commands::TrainArgs {
            config,
            data_dir,
            out_dir,
            seed,
        })
        .map(|_| ()),
        Command::Eval {
            model,
            data_dir,
            dataset,
            split,
        } => commands::eval(commands::EvalArgs {
            model,
            data_dir,
            dataset,
            split,
        })
        .map(|_| ()),
        Command::Report { run_dir } => commands::report(&run_dir).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
