//! Command-line front end: `kinsolve precompute|simulate|convergence|compare|sweep`.

mod ops;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "kinsolve", version, about = "Deterministic and stochastic solvers for delta-kernel kinetic systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// System description file (TOML).
    #[arg(long)]
    system: PathBuf,

    /// Polynomial degree N of the collocation basis (N + 1 nodes).
    #[arg(long, default_value_t = 100)]
    nodes: usize,

    /// Time step of the deterministic integrator.
    #[arg(long, default_value_t = 0.01)]
    dt: f64,

    /// Final time.
    #[arg(long = "t-final", default_value_t = 20.0)]
    t_final: f64,

    /// Bins per subsystem for the stochastic methods.
    #[arg(long, default_value_t = 100)]
    bins: usize,

    /// Total particle budget for the stochastic methods.
    #[arg(long, default_value_t = 1_000_000)]
    particles: u64,

    /// Leap step of the stochastic methods.
    #[arg(long, default_value_t = 0.001)]
    tau: f64,

    /// Dense-regime particle threshold of the hybrid method.
    #[arg(long, default_value_t = 1000)]
    theta: u64,

    /// Ensemble size (replicates) for stochastic runs.
    #[arg(long, default_value_t = 1)]
    ensembles: usize,

    /// Base seed; replicate streams derive from it deterministically.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Tensor cache directory (flag wins over KINSOLVE_CACHE_DIR).
    #[arg(long = "cache-dir")]
    cache_dir: Option<PathBuf>,

    /// Output directory.
    #[arg(long = "out-dir", default_value = "./kinsolve-out")]
    out_dir: PathBuf,

    /// Recompute tensors even when a cache file exists.
    #[arg(long)]
    rebuild: bool,

    /// Snapshot cadence in integrator steps (default: one per unit time).
    #[arg(long = "sample-every")]
    sample_every: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute (or validate) the coefficient tensors and store them.
    Precompute {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run one solver and emit density/moment CSVs plus a manifest.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// mpcm | naive | tau | hybrid
        #[arg(long)]
        method: String,
    },
    /// Self-convergence and phase timings over a list of degrees.
    Convergence {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated ascending degrees, e.g. 8,16,32.
        #[arg(long = "nodes-list", value_delimiter = ',')]
        nodes_list: Vec<usize>,
    },
    /// Difference metric and wall time of the stochastic methods against
    /// the collocation solution, per ensemble size.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated ensemble sizes, e.g. 10,40,160.
        #[arg(long = "ensembles-list", value_delimiter = ',')]
        ensembles_list: Vec<usize>,
    },
    /// One simulate run per parameter value, each in its own directory.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Parameter to sweep (only `gamma` is supported).
        #[arg(long)]
        param: String,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Rule index to modify, or `all`.
        #[arg(long, default_value = "all")]
        rule: String,
        /// Solver to run per value.
        #[arg(long, default_value = "mpcm")]
        method: String,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Precompute { common } => ops::cmd_precompute(&common),
        Command::Simulate { common, method } => ops::cmd_simulate(&common, &method),
        Command::Convergence { common, nodes_list } => ops::cmd_convergence(&common, &nodes_list),
        Command::Compare { common, ensembles_list } => ops::cmd_compare(&common, &ensembles_list),
        Command::Sweep {
            common,
            param,
            values,
            rule,
            method,
        } => ops::cmd_sweep(&common, &param, &values, &rule, &method),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(ops::exit_code(&err));
        }
    }
}
