//! `rfcw`: experiment driver for the random-field Curie-Weiss toolkit.

mod config;
mod output;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::ExperimentConfig;
use output::Artifacts;
use pipeline::{Check, Context, Status};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] rfcw::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Core(e) if e.is_config() => "config",
            CliError::Core(_) => "numerical",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind() {
            "numerical" => 3,
            _ => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "rfcw", version, about = "Metastable Glauber dynamics of the random-field Curie-Weiss model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Critical points, well pair and the free energy along the lifted curve.
    Landscape(Args),
    /// Hitting times of B by plain simulation.
    Simulate(Args),
    /// Hitting times of B through the coupling cycle decomposition.
    Couple(Args),
    /// Exact potential-theoretic checks on the enumerated chain.
    Exact {
        #[command(flatten)]
        args: Args,
        #[arg(long, value_enum, default_value = "all")]
        check: Check,
    },
    /// KS test of the normalized hitting time against Exp(1).
    Expfit(Args),
    /// Mean hitting times from several starts on the start slice.
    Flatness(Args),
}

#[derive(clap::Args)]
struct Args {
    /// TOML experiment configuration.
    config: PathBuf,
    /// Output directory, overriding `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Landscape(_) => "landscape",
            Command::Simulate(_) => "simulate",
            Command::Couple(_) => "couple",
            Command::Exact { .. } => "exact",
            Command::Expfit(_) => "expfit",
            Command::Flatness(_) => "flatness",
        }
    }

    fn args(&self) -> &Args {
        match self {
            Command::Landscape(a) | Command::Simulate(a) | Command::Couple(a) | Command::Expfit(a) | Command::Flatness(a) => a,
            Command::Exact { args, .. } => args,
        }
    }
}

fn env_override(config: &mut ExperimentConfig) -> Result<(), CliError> {
    if let Ok(seed) = std::env::var("SEED") {
        config.model.seed = seed.trim().parse().map_err(|_| CliError::Config(format!("SEED = {seed:?} is not an integer")))?;
    }
    if let Ok(threads) = std::env::var("THREADS") {
        let n: usize =
            threads.trim().parse().map_err(|_| CliError::Config(format!("THREADS = {threads:?} is not an integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("THREADS: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<Status, CliError> {
    let started = Instant::now();
    let args = cli.command.args();
    let (mut config, bytes) = ExperimentConfig::load(&args.config)?;
    env_override(&mut config)?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(&config.output.directory));
    let echo = config.emit();
    let mut ctx = Context::new(config)?;
    let mut out = Artifacts::create(&dir)?;
    out.write("config.echo.toml", echo.as_bytes())?;
    let status = match &cli.command {
        Command::Landscape(_) => pipeline::landscape(&mut ctx, &mut out)?,
        Command::Simulate(_) => pipeline::simulate(&mut ctx, &mut out)?,
        Command::Couple(_) => pipeline::couple(&mut ctx, &mut out)?,
        Command::Exact { check, .. } => pipeline::exact(&mut ctx, &mut out, *check)?,
        Command::Expfit(_) => pipeline::expfit(&mut ctx, &mut out)?,
        Command::Flatness(_) => pipeline::flatness(&mut ctx, &mut out)?,
    };
    let resolved = serde_json::Value::Object(ctx.resolved.clone());
    out.finish(cli.command.name(), &bytes, &echo, &resolved, started.elapsed().as_secs_f64())?;
    Ok(status)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Inconclusive(why)) => {
            eprintln!("{}", json!({ "status": "inconclusive", "reason": why }));
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::from(e.exit_code())
        }
    }
}
