use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridgpr_cli::bench::BenchSpec;
use gridgpr_cli::commands::{self, FitOverrides, PredictInput};
use gridgpr_cli::CliError;

/// Exact Gaussian process regression on cut-based incomplete grids.
#[derive(Parser)]
#[command(name = "gridgpr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the grid coordinates as CSV for external evaluation.
    Grid {
        /// Grid description JSON.
        #[arg(long)]
        grid: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset.
    Fit {
        /// Dataset JSON (grid description plus values).
        #[arg(long)]
        dataset: PathBuf,
        /// Optional fit configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output model JSON (a binary weights sidecar is written next to it).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        cg_tol: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        opt_tol: Option<f64>,
        #[arg(long)]
        max_cycles: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Kernel interaction order (defaults to the grid's cut structure).
        #[arg(long)]
        kernel_cut_level: Option<usize>,
        /// Worker threads (also via GRIDGPR_WORKERS).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Predict at test points from a fitted model.
    Predict {
        /// Model JSON written by `fit`.
        #[arg(long)]
        model: PathBuf,
        /// Test points CSV (header `index,x1,...,xD` or `x1,...,xD`).
        #[arg(long, conflicts_with = "grid")]
        points: Option<PathBuf>,
        /// Test grid description JSON; its points are enumerated in
        /// canonical order.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Also compute the predictive variance (one linear solve per point).
        #[arg(long)]
        variance: bool,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the kernel matrix-vector product over a grid of instances.
    Bench {
        /// Cut levels, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<usize>,
        /// 1D grid sizes, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        /// Dimension counts, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        /// Timed repetitions per instance (the median is reported).
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Memory limit in GiB; instances estimated above it are refused.
        #[arg(long, default_value_t = 8.0)]
        mem_limit_gb: f64,
        /// Minimum warm-up wall time per instance in seconds.
        #[arg(long, default_value_t = 2.0)]
        warmup_secs: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Concurrent MVP streams (throughput mode; keep at 1 for scaling
        /// fits).
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Fit power laws to a benchmark CSV.
    BenchFit {
        /// Input CSV written by `bench`.
        #[arg(long)]
        input: PathBuf,
        /// Optional output CSV for the fitted slopes.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Grid { grid, out } => commands::cmd_grid(&grid, &out),
        Command::Fit {
            dataset,
            config,
            out,
            rank,
            probes,
            cg_tol,
            learning_rate,
            opt_tol,
            max_cycles,
            noise,
            seed,
            kernel_cut_level,
            workers,
        } => {
            let overrides = FitOverrides {
                rank,
                probes,
                cg_tol,
                learning_rate,
                opt_tol,
                max_cycles,
                noise,
                seed,
                kernel_cut_level,
                workers,
            };
            commands::cmd_fit(&dataset, config.as_deref(), &overrides, &out)
        }
        Command::Predict {
            model,
            points,
            grid,
            variance,
            out,
        } => {
            let input = match (points, grid) {
                (Some(p), None) => PredictInput::Points(p),
                (None, Some(g)) => PredictInput::Grid(g),
                _ => {
                    return Err(CliError::Usage(
                        "predict needs exactly one of --points or --grid".into(),
                    ))
                }
            };
            commands::cmd_predict(&model, &input, variance, &out)
        }
        Command::Bench {
            alpha,
            n,
            dims,
            reps,
            out,
            mem_limit_gb,
            warmup_secs,
            seed,
            threads,
        } => {
            let spec = BenchSpec {
                alphas: alpha,
                ns: n,
                dims,
                reps,
                memory_limit_bytes: (mem_limit_gb * (1u64 << 30) as f64) as u64,
                warmup_seconds: warmup_secs,
                seed,
                threads,
            };
            commands::cmd_bench(&spec, &out)
        }
        Command::BenchFit { input, out } => commands::cmd_bench_fit(&input, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("gridgpr: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
