//! `hybridlab`: plan layouts, cost them, verify the kernels, train and
//! evaluate toy models.

mod config;
mod cost;
mod eval;
mod output;
mod plan;
mod trace;
mod train;
mod verify;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "hybridlab", version, about = "Hybrid attention / state-space model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Place special blocks among base blocks and lint the result.
    Plan(plan::PlanArgs),
    /// Parameters, training FLOPs and decode cache of layouts.
    Cost(cost::CostArgs),
    /// Run the numerical property suites.
    Verify(verify::VerifyArgs),
    /// Train a model on a synthetic task or a token file.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint.
    #[command(subcommand)]
    Eval(eval::EvalCommand),
    /// Per-step decode work and state size.
    Trace(trace::TraceArgs),
    /// Print the resolved run configuration as TOML.
    Config(train::ConfigArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(a) => plan::run(a),
        Command::Cost(a) => cost::run(a),
        Command::Verify(a) => verify::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(c) => eval::run(c),
        Command::Trace(a) => trace::run(a),
        Command::Config(a) => train::print_config(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
