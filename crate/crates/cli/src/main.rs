#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Free-boundary solver and verifier for reversible investment under a
/// quadratic capacity cost.
///
/// Problems are described in a TOML file with [diffusion], [cost] and
/// [numerics] tables. When `d0` is omitted it defaults to the geometric
/// midpoint of (d_min, d_max) (arithmetic for ranges touching zero) and a
/// warning is logged. Set REVCAP_THREADS to bound the worker pool and
/// RUST_LOG=info for progress messages.
#[derive(Parser, Debug)]
#[command(name = "revcap", version)]
pub struct Cli {
    /// Problem file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Output file (a directory for `value`). Defaults to stdout.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Values that override the [numerics] table.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Monte Carlo paths.
    #[arg(long, global = true)]
    paths: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Simulation time step.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Simulation horizon; by default sized from the value at the start point.
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Grid as NCxND (capacity by demand points).
    #[arg(long, global = true, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// Pass/fail tolerance of `verify` (VI residual) and `closed-form`.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Boundary table as CSV: c, x_star, y_star (or d, chat_plus, chat_minus).
    Boundaries {
        /// Tabulate ĉ± on this many demand points instead of d̂± on the capacity nodes.
        #[arg(long)]
        by_demand: Option<usize>,
    },
    /// Value surface (surface.csv) and coefficient curves (coefficients.csv).
    Value,
    /// Residual report; exits nonzero if any check fails.
    Verify,
    /// Monte Carlo cost of the optimal (or a perturbed) policy, as JSON.
    Simulate(SimArgs),
    /// Monte Carlo value of the stopping game at frozen capacity, as JSON.
    Dynkin {
        /// Capacity (defaults to numerics.c0).
        #[arg(long)]
        c: Option<f64>,
        /// Demand (defaults to d0).
        #[arg(long)]
        d: Option<f64>,
    },
    /// Closed-form check for GBM with no resale and β₀(d) = d.
    ClosedForm,
}

#[derive(Args, Debug, Clone)]
pub struct SimArgs {
    #[arg(long, allow_hyphen_values = true)]
    c0: Option<f64>,
    #[arg(long)]
    d0: Option<f64>,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    shift_plus: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    shift_minus: f64,
    /// Never act (the cost then estimates V̂).
    #[arg(long)]
    do_nothing: bool,
    /// Test boundaries at grid points only, not at the bridge extremes.
    #[arg(long)]
    no_bridge: bool,
    /// Rank optimal, ±shift and do-nothing policies on common paths.
    #[arg(long, value_name = "SHIFT", allow_hyphen_values = true)]
    compare: Option<f64>,
    /// CSV dump (t, d, c, d_invest, d_disinvest) of path 0.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected NCxND, got {s:?}"))?;
    let nc = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let nd = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    if nc < 2 || nd < 2 {
        return Err("grid needs at least 2 points per axis".into());
    }
    Ok((nc, nd))
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("REVCAP_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("REVCAP_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
