//! `adashrink`: oracle designs, adaptive simulations, risk evaluation,
//! benchmarks and the trial service.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.

mod commands;
mod config;
mod output;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adashrink",
    version,
    about = "Risk-minimizing designs for shrinkage estimators"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy oracle designs over a grid of data-generating processes.
    Oracle(OracleArgs),
    /// Adaptive-trial simulations with compound-MSE trajectories.
    Simulate(SimulateArgs),
    /// Exact and Monte Carlo risk for one design.
    Risk(RiskArgs),
    /// Greedy search for one design problem; prints the step trace as JSON lines.
    Design(DesignArgs),
    /// Per-call timing of the exact risk for each shrinker.
    Bench(BenchArgs),
    /// Run the HTTP trial service.
    Serve(ServeArgs),
}

#[derive(Args)]
pub struct OracleArgs {
    /// Grid config (TOML or JSON); defaults reproduce the full grid.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub draws: Option<usize>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Simulation config (TOML or JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args)]
pub struct RiskArgs {
    /// Query file with `kind`, `n`, `V` and `tau`; replaces the flags below.
    #[arg(long, conflicts_with_all = ["kind", "n", "v", "tau"])]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<String>,
    /// Counts per arm, control first.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Outcome variances per arm, control first.
    #[arg(long = "v", value_delimiter = ',')]
    pub v: Option<Vec<f64>>,
    /// Effects of the active arms (defaults to zero).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub tau: Option<Vec<f64>>,
    /// Monte Carlo draws; 0 skips the simulation.
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct DesignArgs {
    /// Design problem (TOML or JSON): budget, V, tau, kind, minPerArm, start.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long = "k", value_delimiter = ',', default_values_t = [4, 6, 8, 12, 16])]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value = "trials")]
    pub data_dir: PathBuf,
    /// Require `Authorization: Bearer <token>` on every request.
    #[arg(long)]
    pub token: Option<String>,
}

/// Failure classes mapped to exit codes.
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

pub trait FailureExt<T> {
    fn config_err(self) -> Result<T, Failure>;
    fn runtime_err(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> FailureExt<T> for Result<T, E> {
    fn config_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn runtime_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Oracle(a) => commands::oracle(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Risk(a) => commands::risk(a),
        Command::Design(a) => commands::design(a),
        Command::Bench(a) => commands::bench(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
