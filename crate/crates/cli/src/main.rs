//! `imc`: command-line driver for the inductive matrix completion toolkit.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::output::Failure;

#[derive(Parser, Debug)]
#[command(name = "imc", version, about = "Nuclear-norm inductive matrix completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory receiving every artifact and the manifest.
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,

    /// Overrides the seed recorded in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Random instance with orthonormal side information.
    Generate,
    /// Draw noisy entries of an instance.
    Sample,
    /// Penalised estimator, fixed λ or cross-validated.
    Solve,
    /// Equality-constrained estimator.
    SolveExact,
    /// Golfing construction of a dual certificate.
    Certify,
    /// Split the estimation error into observed and unobserved parts.
    Diagnose,
    /// Threshold and generalisation bounds over a grid of N.
    Bounds,
    /// Sample-size sweep.
    Sweep,
    /// Monte-Carlo Rademacher complexity against its bound.
    Rademacher,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Sample => "sample",
            Command::Solve => "solve",
            Command::SolveExact => "solve-exact",
            Command::Certify => "certify",
            Command::Diagnose => "diagnose",
            Command::Bounds => "bounds",
            Command::Sweep => "sweep",
            Command::Rademacher => "rademacher",
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("IMC_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Failure::config(format!("IMC_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::runtime(format!("cannot size the thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    init_threads()?;
    let config = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::config(format!("{} needs --config <file.json>", cli.command.name())))?;
    let input = output::ConfigInput::load(config)?;
    let ctx = output::RunContext {
        subcommand: cli.command.name(),
        input,
        output_dir: cli.output_dir.clone(),
        seed_override: cli.seed,
    };
    match cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Sample => commands::sample(&ctx),
        Command::Solve => commands::solve(&ctx),
        Command::SolveExact => commands::solve_exact(&ctx),
        Command::Certify => commands::certify(&ctx),
        Command::Diagnose => commands::diagnose(&ctx),
        Command::Bounds => commands::bounds(&ctx),
        Command::Sweep => commands::sweep(&ctx),
        Command::Rademacher => commands::rademacher(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("imc {}: {}", cli.command.name(), f.message());
            ExitCode::from(f.code())
        }
    }
}
