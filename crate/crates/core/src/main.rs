use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedexplore::experiment::{emit_results, parse_sweep, run_sweep, AlgorithmSelector};

#[derive(Parser)]
#[command(name = "fedexplore", version, about = "Exploration/exploitation federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration (every list key must have a single value).
    Run(RunArgs),
    /// Run the cartesian product of the configured value lists.
    Sweep(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Worker threads; results are identical for any value.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Overrides the config's `algorithm` key.
    #[arg(long)]
    algorithm: Option<AlgorithmSelector>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (args, single) = match cli.command {
        Command::Run(a) => (a, true),
        Command::Sweep(a) => (a, false),
    };
    let text = match fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let mut spec = match parse_sweep(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    if single && !spec.is_single() {
        eprintln!("error: `run` takes one value per key; use `sweep` for lists");
        return ExitCode::from(2);
    }
    if let Some(a) = args.algorithm {
        spec.algorithms = a;
    }
    let parallelism = args
        .parallelism
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let outcome = match run_sweep(&spec, parallelism) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = emit_results(&outcome.records, &args.out) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    println!("{} runs written to {}", outcome.records.len(), args.out.display());
    if outcome.failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    eprintln!("{} runs failed:", outcome.failures.len());
    for f in &outcome.failures {
        eprintln!("  {}: {}", f.run_id, f.message);
    }
    ExitCode::FAILURE
}
