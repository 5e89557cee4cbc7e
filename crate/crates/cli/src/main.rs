mod commands;
mod oracle;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Decomposed ADMM solver for separable resource allocation.
#[derive(Debug, Parser)]
#[command(name = "dede", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a dede-problem/1 file and write a dede-solution/1 file.
    Solve(SolveArgs),
    /// Generate a case-study instance as a dede-problem/1 file.
    Gen(GenArgs),
    /// Solve instances with the engine and the reference oracle and write a CSV.
    Compare(CompareArgs),
    /// Time the engine across worker counts and write a CSV.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EngineFlags {
    /// Worker threads for the per-group steps [default: available cores]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Initial penalty parameter.
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub eps_abs: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub eps_rel: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    /// Wall-clock budget in milliseconds.
    #[arg(long)]
    pub time_budget_ms: Option<u64>,
    /// Static block scheduling, so results do not depend on thread timing.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub input: PathBuf,
    /// Solution file [default: stdout]
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineFlags,
    /// Solution file of an earlier solve to start from.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Per-iteration CSV trace.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Omit wall-clock fields so identical runs give identical files.
    #[arg(long)]
    pub reproducible: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(subcommand)]
    pub kind: GenKind,
    /// Output file [default: stdout]
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClusterObjective {
    MaxMin,
    PropFair,
    TotalThroughput,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TrafficObjective {
    TotalFlow,
    MinMlu,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PerturbKind {
    RhsNoise,
    RhsScale,
    DemandShift,
    LinkFailures,
}

#[derive(Debug, Subcommand)]
pub enum GenKind {
    /// Heterogeneous cluster scheduling: resource types x jobs.
    Cluster {
        #[arg(long, default_value_t = 5)]
        types: usize,
        #[arg(long, default_value_t = 8)]
        jobs: usize,
        #[arg(long, value_enum, default_value_t = ClusterObjective::MaxMin)]
        objective: ClusterObjective,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Path-based traffic engineering on a grid: links x demands.
    Traffic {
        #[arg(long, default_value_t = 3)]
        rows: usize,
        #[arg(long, default_value_t = 3)]
        cols: usize,
        #[arg(long, default_value_t = 20)]
        demands: usize,
        #[arg(long, default_value_t = 4)]
        paths: usize,
        #[arg(long, value_enum, default_value_t = TrafficObjective::TotalFlow)]
        objective: TrafficObjective,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Shard placement with a load band: servers x shards.
    LoadBalance {
        #[arg(long, default_value_t = 3)]
        servers: usize,
        #[arg(long, default_value_t = 4)]
        shards: usize,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// The three-job, three-type scheduling example.
    Toy {
        #[arg(long, value_enum, default_value_t = ClusterObjective::TotalThroughput)]
        objective: ClusterObjective,
    },
    /// Perturbs the generator record embedded in a problem file.
    Perturb {
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: PerturbKind,
        /// Noise scale, scale factor, or number of failed links.
        #[arg(long)]
        amount: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Problem files, or directories whose `.json` problem files are used.
    pub inputs: Vec<PathBuf>,
    /// CSV output [default: stdout]
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineFlags,
    /// Largest number of allocation entries handed to the oracle.
    #[arg(long, default_value_t = 2000)]
    pub oracle_limit: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub input: PathBuf,
    /// CSV output [default: stdout]
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineFlags,
    /// Worker counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub workers_list: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Also compare warm and cold starts after scaling capacities by this factor.
    #[arg(long)]
    pub warm_scale: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(a) => commands::solve(&a),
        Command::Gen(a) => commands::generate(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dede: {e:#}");
            ExitCode::from(e.code())
        }
    }
}
