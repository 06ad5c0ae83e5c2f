//! Binary entry point: argument parsing, thread-pool setup, dispatch, and
//! the exit-code contract (0 pass, 1 check failure, 2 config error,
//! 3 numeric failure). Usage errors from the argument parser also exit
//! with code 2.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hypobridge_cli::commands::{cmd_bridge, cmd_extremal, cmd_kernel, cmd_verify, Outcome};
use hypobridge_cli::config::{build_scenario, load_config};
use hypobridge_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "hypobridge",
    version,
    about = "Minimum-energy distribution steering on chain-of-subsystems diffusions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a transition kernel and run its self-checks.
    Kernel(RunArgs),
    /// Solve the steering problem end to end and verify the cost identity.
    Bridge(RunArgs),
    /// Compare free and reweighted minimum-action paths.
    Extremal(RunArgs),
    /// Run the full invariant suite for the configured scenario.
    Verify(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts (overrides outputs.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override folded into the resolved config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the data-parallel loops (1 forces the sequential
    /// path).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Kernel(a) => ("kernel", a),
        Command::Bridge(a) => ("bridge", a),
        Command::Extremal(a) => ("extremal", a),
        Command::Verify(a) => ("verify", a),
    };
    match run(&cli.command, args) {
        Ok(outcome) => {
            if outcome.verdict {
                println!("{name}: PASS — {}", outcome.summary);
                ExitCode::SUCCESS
            } else {
                println!("{name}: FAIL — {}", outcome.summary);
                ExitCode::from(1)
            }
        }
        Err(err) => {
            eprintln!("{name}: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(command: &Command, args: &RunArgs) -> CliResult<Outcome> {
    if let Some(threads) = args.threads {
        configure_threads(threads)?;
    }
    let config = load_config(&args.config)?;
    let scenario = build_scenario(config, args.seed)?;
    let out = args
        .out
        .clone()
        .or_else(|| scenario.config.outputs.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    match command {
        Command::Kernel(_) => cmd_kernel(&scenario, &out),
        Command::Bridge(_) => cmd_bridge(&scenario, &out),
        Command::Extremal(_) => cmd_extremal(&scenario, &out),
        Command::Verify(_) => cmd_verify(&scenario, &out),
    }
}

fn configure_threads(threads: usize) -> CliResult<()> {
    if threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    if threads == 1 {
        hypobridge::par::force_sequential(true);
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))
}
