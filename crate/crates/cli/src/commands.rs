//! The five pipeline commands: grid emission, fitting, prediction, and the
//! benchmark pair.

use std::path::{Path, PathBuf};

use gridgpr::files::GridDescription;
use gridgpr::gpr::{fit, FitConfig, GprModel};

use crate::bench::{self, BenchSpec};
use crate::dataset;
use crate::CliError;

fn read_grid_description(path: &Path) -> Result<GridDescription, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("malformed grid description {}: {e}", path.display())))
}

/// Emits the grid coordinates as CSV, canonical order, for external
/// evaluation. Header: `index,x1,...,xD`.
pub fn cmd_grid(grid_path: &Path, out: &Path) -> Result<(), CliError> {
    let desc = read_grid_description(grid_path)?;
    let grid = desc.build()?;
    let mut text = String::from("index");
    for m in 1..=grid.dims() {
        text.push_str(&format!(",x{m}"));
    }
    text.push('\n');
    for (index, coord) in grid.coordinates() {
        text.push_str(&index.to_string());
        for x in coord {
            text.push_str(&format!(",{x}"));
        }
        text.push('\n');
    }
    std::fs::write(out, text)?;
    Ok(())
}

/// Per-flag overrides on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct FitOverrides {
    pub rank: Option<usize>,
    pub probes: Option<usize>,
    pub cg_tol: Option<f64>,
    pub learning_rate: Option<f64>,
    pub opt_tol: Option<f64>,
    pub max_cycles: Option<usize>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
    pub kernel_cut_level: Option<usize>,
    pub workers: Option<usize>,
}

/// Effective configuration: flag > config file > environment (workers) >
/// built-in default.
pub fn effective_config(
    config_path: Option<&Path>,
    overrides: &FitOverrides,
) -> Result<FitConfig, CliError> {
    let mut workers_from_file = false;
    let mut config = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
                CliError::Usage(format!("malformed config {}: {e}", path.display()))
            })?;
            workers_from_file = raw.get("workers").is_some();
            serde_json::from_value(raw).map_err(|e| {
                CliError::Usage(format!("malformed config {}: {e}", path.display()))
            })?
        }
        None => FitConfig::default(),
    };
    if !workers_from_file {
        if let Ok(w) = std::env::var("GRIDGPR_WORKERS") {
            if let Ok(w) = w.parse::<usize>() {
                config.workers = w.max(1);
            }
        }
    }
    if let Some(v) = overrides.rank {
        config.rank = v;
    }
    if let Some(v) = overrides.probes {
        config.probes = v;
    }
    if let Some(v) = overrides.cg_tol {
        config.cg_tol = v;
    }
    if let Some(v) = overrides.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = overrides.opt_tol {
        config.opt_tol = v;
    }
    if let Some(v) = overrides.max_cycles {
        config.max_cycles = v;
    }
    if let Some(v) = overrides.noise {
        config.noise = v;
    }
    if let Some(v) = overrides.seed {
        config.seed = v;
    }
    if let Some(v) = overrides.kernel_cut_level {
        config.kernel_cut_level = Some(v);
    }
    if let Some(v) = overrides.workers {
        config.workers = v.max(1);
    }
    Ok(config)
}

/// Fits a model from a dataset and writes the model file. Non-convergence
/// still writes the model and reports a warning.
pub fn cmd_fit(
    dataset_path: &Path,
    config_path: Option<&Path>,
    overrides: &FitOverrides,
    out: &Path,
) -> Result<(), CliError> {
    let config = effective_config(config_path, overrides)?;
    let data = dataset::load(dataset_path)?;
    let model = fit(data.grid, &data.values, &config)?;
    model.save(out)?;
    if !model.diagnostics.converged {
        return Err(CliError::Warnings(format!(
            "optimizer did not converge in {} cycles (gradient norm {:.3e}); model written to {}",
            model.diagnostics.cycles,
            model.diagnostics.final_grad_norm,
            out.display()
        )));
    }
    Ok(())
}

/// Test points: either a CSV of coordinates or a grid description whose
/// points are enumerated in canonical order.
pub enum PredictInput {
    Points(PathBuf),
    Grid(PathBuf),
}

fn read_points_csv(path: &Path, dims: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Usage("empty points file".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let skip_index = columns.first() == Some(&"index");
    let coord_columns = columns.len() - usize::from(skip_index);
    if coord_columns != dims {
        return Err(CliError::Usage(format!(
            "points file has {coord_columns} coordinate columns but the model has {dims} modes"
        )));
    }
    let mut points = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(CliError::Usage(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                columns.len(),
                fields.len()
            )));
        }
        let coords: Result<Vec<f64>, _> = fields[usize::from(skip_index)..]
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect();
        points.push(coords.map_err(|e| {
            CliError::Usage(format!("line {}: bad coordinate: {e}", lineno + 2))
        })?);
    }
    Ok(points)
}

/// Predicts means (and optionally variances) at the requested points.
/// Output CSV: `index,mean[,variance]`.
pub fn cmd_predict(
    model_path: &Path,
    input: &PredictInput,
    variance: bool,
    out: &Path,
) -> Result<(), CliError> {
    let model = GprModel::load(model_path)?;
    let dims = model.raw_grid.dims();
    let points: Vec<Vec<f64>> = match input {
        PredictInput::Points(path) => read_points_csv(path, dims)?,
        PredictInput::Grid(path) => {
            let desc = read_grid_description(path)?;
            let grid = desc.build()?;
            if grid.dims() != dims {
                return Err(CliError::Usage(format!(
                    "test grid has {} modes but the model has {dims}",
                    grid.dims()
                )));
            }
            grid.coordinates().map(|(_, c)| c).collect()
        }
    };
    let means = model.predict_mean(&points)?;
    let mut text = String::from(if variance {
        "index,mean,variance\n"
    } else {
        "index,mean\n"
    });
    let mut unconverged = 0usize;
    if variance {
        let variances = model.predict_variances(&points)?;
        for (i, (var, mean)) in variances.iter().zip(&means).enumerate() {
            if !var.cg_converged {
                unconverged += 1;
            }
            text.push_str(&format!("{i},{mean:e},{:e}\n", var.value));
        }
    } else {
        for (i, mean) in means.iter().enumerate() {
            text.push_str(&format!("{i},{mean:e}\n"));
        }
    }
    std::fs::write(out, text)?;
    if unconverged > 0 {
        return Err(CliError::Warnings(format!(
            "{unconverged} variance solve(s) did not reach the CG tolerance; predictions written to {}",
            out.display()
        )));
    }
    Ok(())
}

/// Runs the MVP scaling benchmarks and writes the records CSV.
pub fn cmd_bench(spec: &BenchSpec, out: &Path) -> Result<(), CliError> {
    let records = bench::run(spec)?;
    bench::write_csv(out, &records)?;
    for r in &records {
        eprintln!(
            "alpha={} n={} dims={} points={} seconds={:.6e}",
            r.alpha, r.n, r.dims, r.n_hat, r.seconds
        );
    }
    Ok(())
}

/// Fits power laws to a benchmark CSV, printing one line per group and
/// optionally writing a CSV of the fits.
pub fn cmd_bench_fit(input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let records = bench::read_csv(input)?;
    let fits = bench::fit_power_laws(&records)?;
    let mut text = String::from("alpha,n,against,slope,intercept,points\n");
    for f in &fits {
        println!(
            "alpha={} n={} against={} slope={:.4} intercept={:.4} points={}",
            f.alpha, f.n, f.against, f.slope, f.intercept, f.points
        );
        text.push_str(&format!(
            "{},{},{},{:e},{:e},{}\n",
            f.alpha, f.n, f.against, f.slope, f.intercept, f.points
        ));
    }
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(())
}
