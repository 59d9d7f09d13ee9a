use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trafspread::DispatcherKind;

mod commands;
mod output;

#[derive(Parser, Debug)]
#[command(name = "trafspread", version, about = "Energy-aware traffic spreading: policy synthesis and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the two-user MDP and write the policy grid, switching curves and a summary.
    Solve(Common),
    /// Simulate one scenario and write its metrics record.
    Simulate(Common),
    /// Simulate one run per weight and write the delay/power tradeoff table.
    Sweep(Common),
    /// Solve per weight and write the switching curves.
    Curves(Common),
    /// Check the structural properties of the solved MDP.
    Verify(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Scenario file (TOML). `verify` falls back to a built-in on/off scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight applied to every user pair.
    #[arg(long, conflicts_with = "weights")]
    weight: Option<f64>,
    /// Comma-separated weights for `sweep` and `curves`.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Per-queue truncation of the MDP box.
    #[arg(long)]
    trunc: Option<u32>,
    /// Channel states per user (K).
    #[arg(long)]
    states: Option<usize>,
    #[arg(long, value_parser = parse_dispatcher)]
    dispatcher: Option<DispatcherKind>,
    /// Overwrite one service rate with a negative value before verifying.
    #[arg(long, hide = true)]
    corrupt_rate: bool,
}

fn parse_dispatcher(s: &str) -> Result<DispatcherKind, String> {
    [
        DispatcherKind::None,
        DispatcherKind::Jsq,
        DispatcherKind::Optimal,
        DispatcherKind::Heuristic,
        DispatcherKind::LowerBound,
    ]
    .into_iter()
    .find(|d| d.label() == s)
    .ok_or_else(|| format!("unknown dispatcher `{s}` (none, jsq, optimal, heuristic, lower-bound)"))
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Unstable(String),
    Solver(String),
    Verification(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Unstable(_) => 3,
            Failure::Solver(_) => 4,
            Failure::Verification(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Unstable(m) | Failure::Solver(m) | Failure::Verification(m) | Failure::Io(m) => m,
        }
    }
}

impl From<trafspread::Error> for Failure {
    fn from(e: trafspread::Error) -> Self {
        use trafspread::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidInput(_) | E::InvalidProblem(_) | E::ResourceLimit { .. } => Failure::Config(msg),
            E::NotConverged { .. } | E::ReducedSolve { .. } => Failure::Solver(msg),
            E::Unstable { .. } => Failure::Unstable(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(a) => commands::solve_policy(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Curves(a) => commands::curves(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
