//! `levex`: solve, tabulate, simulate and verify the extraction model.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 bad config or arguments,
//! 3 no admissible root, 4 too many non-finite simulation paths.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use levex_core::Error;

#[derive(Parser, Debug)]
#[command(name = "levex", version, about = "Optimal extraction under regime-switching Lévy prices")]
struct Cli {
    /// Directory for all artifacts.
    #[arg(long, global = true, env = "LEVEX_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the coefficient system and write the admissible solution and all roots.
    Solve {
        /// `example1`, `example2`, or a model config JSON file.
        model: String,
        #[arg(long, value_enum, default_value_t = Mode::Formula)]
        mode: Mode,
    },
    /// Tabulate V(x, y, i) on a price grid as CSV.
    Curves(CurvesArgs),
    /// Monte-Carlo estimate of the discounted payoff of a policy.
    Simulate(SimulateArgs),
    /// Coefficient cross-check, HJB residual and Monte-Carlo check; exit 1 on any FAIL.
    Verify {
        model: String,
        #[arg(long, value_enum, default_value_t = Mode::Formula)]
        mode: Mode,
        #[command(flatten)]
        sim: SimFlags,
    },
    /// Discrepancy report for reference example 1 or 2.
    Reproduce { example: u32 },
}

#[derive(Args, Debug)]
struct CurvesArgs {
    /// A solution JSON written by `solve`, `example1`, `example2`, or a model config.
    source: String,
    /// Used when `source` is a model rather than a solution.
    #[arg(long, value_enum, default_value_t = Mode::Formula)]
    mode: Mode,
    #[arg(long, default_value_t = 0.0)]
    x_min: f64,
    #[arg(long, default_value_t = 5.0)]
    x_max: f64,
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 0.0)]
    y: f64,
    /// 1-based regimes to tabulate; all by default.
    #[arg(long, value_delimiter = ',')]
    regimes: Vec<usize>,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "curves.csv")]
    output: String,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    model: String,
    #[arg(long, value_enum, default_value_t = PolicyArg::Feedback)]
    policy: PolicyArg,
    /// Rate for `--policy constant`.
    #[arg(long, default_value_t = 0.0)]
    u0: f64,
    /// Solution used by `--policy feedback`.
    #[arg(long, value_enum, default_value_t = Mode::Formula)]
    mode: Mode,
    /// Clamp the control to `[lo, hi]` (Euler only). Defaults to the model's bounds.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    clamp: Option<Vec<f64>>,
    /// Also write per-path payoffs to `paths.csv`.
    #[arg(long)]
    per_path: bool,
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Args, Debug, Clone)]
struct SimFlags {
    #[arg(long, default_value_t = 50_000)]
    paths: usize,
    #[arg(long, default_value_t = 400.0)]
    horizon: f64,
    /// Euler step; selects the Euler scheme.
    #[arg(long, conflicts_with = "exact")]
    dt: Option<f64>,
    /// Payoff grid step of the exact scheme (the default scheme).
    #[arg(long, default_missing_value = "0.1", num_args = 0..=1)]
    exact: Option<f64>,
    /// Small-jump truncation for infinite-activity measures.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Formula,
    Printed,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum PolicyArg {
    Feedback,
    Zero,
    Constant,
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    VerifyFailed,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NoAdmissibleRoot { .. } | Error::DegenerateSystem(_) | Error::NotAdmissible(_) => 3,
        Error::FlaggedPaths { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerifyFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
