//! Command-line driver for the chain transfer solver.
//!
//! Exit codes: 0 success, 2 solver convergence failure, 3 validation or
//! oracle failure, 4 I/O or schema error.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use qbrach::solver::MethodChoice;

/// Environment variable holding the default seed-store path.
pub const SEED_STORE_ENV: &str = "QBRACH_SEED_STORE";

#[derive(Debug)]
pub enum CliError {
    /// Solver failed to converge (exit 2).
    Convergence(String),
    /// A validation, oracle, or checksum threshold was breached (exit 3).
    Validation(String),
    /// Filesystem failure (exit 4).
    Io(String),
    /// Malformed input file or invalid configuration (exit 4).
    Schema(String),
}

impl CliError {
    pub fn from_core(err: qbrach::Error) -> Self {
        use qbrach::Error as E;
        match err {
            E::Convergence { .. } | E::Stiffness { .. } | E::Divergence { .. } | E::Rank(_)
            | E::Numerical(_) => CliError::Convergence(err.to_string()),
            E::AdjointCheck { .. } | E::BasisClosure { .. } | E::Gauge { .. } => {
                CliError::Validation(err.to_string())
            }
            E::Shape { .. } | E::IndexDomain { .. } | E::InvalidSpec(_) | E::Precondition(_) => {
                CliError::Schema(err.to_string())
            }
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Convergence(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Io(_) | CliError::Schema(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Convergence(m) => write!(f, "convergence failure: {m}"),
            CliError::Validation(m) => write!(f, "validation failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Schema(m) => write!(f, "schema error: {m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Auto,
    Shooting,
    Gradient,
}

impl From<MethodArg> for MethodChoice {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Auto => MethodChoice::Auto,
            MethodArg::Shooting => MethodChoice::Shooting,
            MethodArg::Gradient => MethodChoice::Gradient,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    Stepwise,
    Perfect,
}

#[derive(Parser)]
#[command(
    name = "qbrach",
    about = "Time-optimal coupling schedules for single-excitation transfer in qubit chains",
    version
)]
struct Cli {
    /// Bound worker threads used for Jacobian columns and restarts.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one chain length and write a solution file.
    Solve(SolveArgs),
    /// Solve a range of chain lengths by continuation and fit the
    /// scaling law.
    Sweep(SweepArgs),
    /// Emit a closed-form baseline protocol.
    Baseline(BaselineArgs),
    /// Sample a solution or schedule into a trajectory CSV.
    Simulate(SimulateArgs),
    /// Fit the linear scaling law to a sweep CSV.
    Fit(FitArgs),
    /// Run the oracle, conservation, and baseline verification suite.
    Verify(VerifyArgs),
    /// Export a seed store as a flat CSV table.
    Export(ExportArgs),
}

#[derive(clap::Args)]
pub struct SolveArgs {
    /// Chain length N.
    #[arg(long)]
    pub n: usize,
    /// Coupling budget J0.
    #[arg(long, default_value_t = 1.0)]
    pub j0: f64,
    /// Solver tolerance (shooting residual norm / gradient infidelity).
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_enum, default_value = "auto")]
    pub method: MethodArg,
    /// Seed store path (defaults to $QBRACH_SEED_STORE).
    #[arg(long)]
    pub seed_store: Option<PathBuf>,
    /// Output solution file (default solution-n<N>.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub n_min: usize,
    #[arg(long)]
    pub n_max: usize,
    #[arg(long, default_value_t = 1.0)]
    pub j0: f64,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_enum, default_value = "auto")]
    pub method: MethodArg,
    #[arg(long)]
    pub seed_store: Option<PathBuf>,
    /// Output CSV (default sweep.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub j0: f64,
    #[arg(long, value_enum)]
    pub protocol: ProtocolArg,
    /// Optional schedule file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct SimulateArgs {
    /// Solution or schedule JSON.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of uniform samples.
    #[arg(long, default_value_t = 401)]
    pub samples: usize,
    /// Output CSV (default trajectory.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct FitArgs {
    /// Sweep CSV produced by the sweep command.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
}

#[derive(clap::Args)]
pub struct VerifyArgs {
    /// Directory for the JSON reports (default verify-reports).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Chain length for the conservation check.
    #[arg(long, default_value_t = 15)]
    pub n_conservation: usize,
    #[arg(long)]
    pub seed_store: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub seed_store: Option<PathBuf>,
    /// Output CSV (default seed-table.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    let result = match cli.command {
        Command::Solve(args) => commands::cmd_solve(&args),
        Command::Sweep(args) => commands::cmd_sweep(&args),
        Command::Baseline(args) => commands::cmd_baseline(&args),
        Command::Simulate(args) => commands::cmd_simulate(&args),
        Command::Fit(args) => commands::cmd_fit(&args),
        Command::Verify(args) => commands::cmd_verify(&args),
        Command::Export(args) => commands::cmd_export(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("qbrach: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
