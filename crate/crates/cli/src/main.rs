mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use topoprune::oracle::data::DirFormat;

use commands::{DataKind, Outcome};
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "topoprune", version, about = "FLOPs-constrained channel pruning search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer FLOPs and parameter report.
    Analyze {
        #[command(flatten)]
        o: Overrides,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, value_enum, default_value = "digits")]
        kind: DataKind,
        #[arg(long, default_value_t = 1000)]
        train: usize,
        #[arg(long, default_value_t = 5000)]
        test: usize,
        #[arg(long, value_enum, default_value = "idx")]
        format: Format,
    },
    /// Train a model on a dataset and save its weights.
    TrainBaseline {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Search per-layer pruning ratios under a FLOPs budget.
    Search {
        #[command(flatten)]
        o: Overrides,
        /// Uniform random actions instead of the agent.
        #[arg(long)]
        random: bool,
    },
    /// Fine-tune a pruned model.
    Finetune {
        #[command(flatten)]
        o: Overrides,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Idx,
    Csv,
}

fn fail(code: u8, kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message, "exit_code": code } }));
    ExitCode::from(code)
}

fn run(cli: Cli) -> topoprune::Result<Outcome> {
    let (o, cmd) = match &cli.command {
        Command::Analyze { o, .. }
        | Command::GenData { o, .. }
        | Command::TrainBaseline { o, .. }
        | Command::Search { o, .. }
        | Command::Finetune { o } => (o, &cli.command),
    };
    let mut cfg = RunConfig::resolve(o)?;
    cfg.validate()?;
    match cmd {
        Command::Analyze { json, .. } => commands::analyze(&cfg, *json),
        Command::GenData { kind, train, test, format, .. } => {
            let format = match format {
                Format::Idx => DirFormat::Idx,
                Format::Csv => DirFormat::Csv,
            };
            commands::gen_data(&cfg, *kind, *train, *test, format)
        }
        Command::TrainBaseline { epochs, .. } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            commands::train_baseline(&cfg)
        }
        Command::Search { random, .. } => commands::search(&cfg, o.fine_tune_epochs, *random),
        Command::Finetune { .. } => commands::finetune(&cfg, o.fine_tune_epochs),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(2, "usage", e.to_string()),
    };
    let is_analyze = matches!(cli.command, Command::Analyze { .. });
    match run(cli) {
        Ok(Outcome::Done(summary)) => {
            if !is_analyze {
                let _ = commands::emit(&format!("{summary}\n"));
            }
            ExitCode::SUCCESS
        }
        Ok(Outcome::SearchFailed(f, summary)) => {
            let _ = commands::emit(&format!("{summary}\n"));
            fail(
                3,
                "search_failure",
                format!("no episode met flops target {} in {} episodes", f.flops_target, f.episodes),
            )
        }
        Err(e) => {
            let (code, kind) = commands::classify(&e);
            fail(code as u8, kind, e.to_string())
        }
    }
}
