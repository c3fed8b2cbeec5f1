use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "snnbench", version, about = "Spiking SqueezeNet pruning and energy benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct RunArgs {
    /// key=value configuration file
    #[arg(long)]
    config: PathBuf,
    /// Override one key, e.g. --set train.lr=0.01 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Allow full-dataset training inside `ablate`
    #[arg(long)]
    full_scale: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write checkpoint, logs and a bench row
    Train(RunArgs),
    /// Evaluate a checkpoint (profile.checkpoint) on the evaluation split
    Eval(RunArgs),
    /// Count AC/MAC operations and energy for a checkpoint or architecture
    Profile(RunArgs),
    /// Profile (and optionally train) all nine pruning schedules
    Ablate(RunArgs),
    /// Scatter plot and Pareto summary of a bench CSV
    Report(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => commands::Run::new(a).and_then(|r| r.train()),
        Command::Eval(a) => commands::Run::new(a).and_then(|r| r.eval()),
        Command::Profile(a) => commands::Run::new(a).and_then(|r| r.profile()),
        Command::Ablate(a) => commands::Run::new(a).and_then(|r| r.ablate()),
        Command::Report(a) => commands::Run::new(a).and_then(|r| r.report()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("snnbench: {msg}");
            ExitCode::FAILURE
        }
    }
}
