//! `tassel`: synthetic data, training, evaluation, counting and gradient checks.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Preset;

#[derive(Parser, Debug)]
#[command(name = "tassel", version, about = "Exemplar-conditioned object counting")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent of the per-run timestamped output directories [default: runs]
    #[arg(long, global = true, env = run::OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    /// Architecture and schedule preset underlying the config file.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with annotations, splits and a manifest.
    Synth(commands::SynthArgs),
    /// Train a model; writes best and final checkpoints and a JSONL log.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a split (3-shot, 1-shot, strata, throughput).
    Eval(commands::EvalArgs),
    /// Count objects in one image given 1 to 3 exemplar boxes.
    Count(commands::CountArgs),
    /// Compare every backward pass with finite differences.
    Gradcheck(commands::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let ctx = commands::Context {
        config: cli.config,
        output_root: cli.output_root,
        preset: cli.preset,
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Count(a) => commands::count(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
