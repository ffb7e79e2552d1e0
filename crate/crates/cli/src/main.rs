//! `stoknap` command-line front end.
//!
//! Exit codes: 0 on success, 1 on bad input, 2 when a verification suite fails.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "stoknap", version, about = "Correlated stochastic knapsack solver and verifier")]
struct Cli {
    /// Worker threads for parallel Monte-Carlo loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an instance file.
    Gen(GenArgs),
    /// Run the continuous greedy and write a solution file.
    Solve(SolveArgs),
    /// Estimate the expected objective of the rounded policy.
    Simulate(SimulateArgs),
    /// Run a verification suite; exits with 2 if any row fails.
    Verify(VerifyArgs),
    /// Dump one execution of the rounded policy.
    Trace(TraceArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GenFamily {
    Random,
    Spot,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    Additive,
    Concave,
    Coverage,
}

#[derive(Args, Debug)]
struct SeedArg {
    /// Random seed; falls back to STOKNAP_SEED.
    #[arg(long, env = "STOKNAP_SEED")]
    seed: u64,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(value_enum)]
    family: GenFamily,
    /// Original items (random family).
    #[arg(long, default_value_t = 2)]
    n_base: usize,
    /// Jobs (spot family).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Spot instances (spot family).
    #[arg(long, default_value_t = 1)]
    instances: usize,
    #[arg(long, default_value_t = 3)]
    budget: u32,
    #[arg(long, default_value_t = 2)]
    reward_bound: u32,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Additive)]
    objective: ObjectiveArg,
    /// Every item gets a single fixed size.
    #[arg(long)]
    deterministic: bool,
    #[command(flatten)]
    seed: SeedArg,
    /// Output path (default: stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GreedyArgs {
    /// Stopping time of the continuous greedy.
    #[arg(long, default_value_t = 0.5)]
    b: f64,
    /// Step size (default: largest divisor of b below min(0.05, 1/(2 n^3))).
    #[arg(long)]
    delta: Option<f64>,
    /// Samples per marginal-weight pass.
    #[arg(long, default_value_t = 2000)]
    samples: u64,
    /// Use exact marginals (small instances only).
    #[arg(long)]
    exact_marginals: bool,
}

#[derive(Args, Debug)]
struct SolveArgs {
    instance: PathBuf,
    #[command(flatten)]
    greedy: GreedyArgs,
    #[command(flatten)]
    seed: SeedArg,
    /// Solution output path (default: stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Store every LP variable in the solution file.
    #[arg(long)]
    include_values: bool,
    /// Quality report CSV (default: stderr).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-iteration trace CSV.
    #[arg(long)]
    iterations: Option<PathBuf>,
    /// Write the relaxation in LP text format with unit weights.
    #[arg(long)]
    lp_dump: Option<PathBuf>,
    /// Bound on the exact-optimum state space.
    #[arg(long, default_value_t = 10_000_000)]
    dp_guard: u64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    instance: PathBuf,
    solution: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    runs: u64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Crs,
    Mono,
    Polytope,
    Multilinear,
    DpRatio,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    instance: PathBuf,
    #[arg(long, value_enum)]
    suite: Suite,
    /// Solution to verify (default: solve first).
    #[arg(long)]
    solution: Option<PathBuf>,
    #[command(flatten)]
    greedy: GreedyArgs,
    /// Monte-Carlo runs or trials per measurement.
    #[arg(long, default_value_t = 100_000)]
    runs: u64,
    /// Profile pairs (mono) or repetitions (multilinear).
    #[arg(long, default_value_t = 100)]
    repetitions: u64,
    /// Smallest start probability tracked by the crs suite.
    #[arg(long, default_value_t = 0.01)]
    min_prob: f64,
    #[arg(long, default_value_t = 10_000_000)]
    dp_guard: u64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    instance: PathBuf,
    solution: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Solve(a) => commands::solve(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Verify(a) => commands::verify(a),
        Command::Trace(a) => commands::trace(a),
    };
    match result {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::VerificationFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
