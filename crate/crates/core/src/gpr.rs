//! End-to-end Gaussian process regression on incomplete grids:
//! standardization, marginal-likelihood estimation with priors, Adam
//! optimization of the log hyperparameters, prediction of means and
//! variances, and the serializable model format.
//!
//! The optimized objective is the marginal log-likelihood divided by the
//! number of training points, plus prior log-densities (Gamma over the
//! order variances, normal over the log length scales). The noise variance
//! is fixed, not optimized, and is interpreted in standardized output
//! units.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fastmvp;
use crate::files::{self, FileError, GridDescription};
use crate::grid::{GridError, IncompleteGrid, McrTensor, ModeCombinationRange};
use crate::kernel::{AdditiveKernel, KernelError};
use crate::krylov::{self, KrylovError};
use crate::precond::{Preconditioner, PrecondError};

#[derive(Debug, Error)]
pub enum GprError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Precond(#[from] PrecondError),
    #[error(transparent)]
    Krylov(#[from] KrylovError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Affine maps taking raw inputs/outputs to the standardized units the
/// model works in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_shift: f64,
    pub output_scale: f64,
}

impl Standardization {
    pub fn standardize_point(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(m, &v)| (v - self.input_shift[m]) / self.input_scale[m])
            .collect()
    }

    pub fn destandardize_output(&self, y: f64) -> f64 {
        y * self.output_scale + self.output_shift
    }
}

/// Standardizes the grid geometry and outputs to zero mean and unit
/// population variance over the training set. Input moments are exact,
/// computed from the per-mode value frequencies. Constant input modes keep
/// unit scale; constant outputs are rejected.
pub fn standardize(
    grid: &Arc<IncompleteGrid>,
    y: &[f64],
) -> Result<(Arc<IncompleteGrid>, Vec<f64>, Standardization), GprError> {
    let n = grid.len();
    if y.len() != n {
        return Err(GprError::InvalidArgument(format!(
            "expected {n} outputs, got {}",
            y.len()
        )));
    }
    if n < 2 {
        return Err(GprError::DegenerateData(
            "need at least two training points".into(),
        ));
    }
    let total = n as f64;
    let dims = grid.dims();
    let mut shift = Vec::with_capacity(dims);
    let mut scale = Vec::with_capacity(dims);
    for m in 0..dims {
        let w = grid.mode_value_counts(m);
        let coords = grid.shape().grid_1d(m);
        let mean: f64 = w.iter().zip(coords).map(|(wi, xi)| wi * xi).sum::<f64>() / total;
        let var: f64 = w
            .iter()
            .zip(coords)
            .map(|(wi, xi)| wi * (xi - mean) * (xi - mean))
            .sum::<f64>()
            / total;
        shift.push(mean);
        scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    let y_mean = y.iter().sum::<f64>() / total;
    let y_var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / total;
    if y_var <= 0.0 || y_var.is_nan() {
        return Err(GprError::DegenerateData(
            "outputs have zero variance".into(),
        ));
    }
    let y_scale = y_var.sqrt();
    let std_shape = grid.shape().transformed(&shift, &scale);
    let std_grid = IncompleteGrid::new(std_shape, grid.mcr().clone())?;
    let y_std: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
    Ok((
        std_grid,
        y_std,
        Standardization {
            input_shift: shift,
            input_scale: scale,
            output_shift: y_mean,
            output_scale: y_scale,
        },
    ))
}

/// Log hyperparameters: the optimization variables plus the fixed noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub log_order_variances: Vec<f64>,
    pub log_length_scales: Vec<f64>,
    pub noise: f64,
}

impl Hyperparameters {
    pub fn sigma2(&self) -> Vec<f64> {
        self.log_order_variances.iter().map(|z| z.exp()).collect()
    }

    pub fn ell(&self) -> Vec<f64> {
        self.log_length_scales.iter().map(|z| z.exp()).collect()
    }

    fn as_opt_vec(&self) -> Vec<f64> {
        let mut v = self.log_order_variances.clone();
        v.extend_from_slice(&self.log_length_scales);
        v
    }

    fn with_opt_vec(&self, v: &[f64]) -> Hyperparameters {
        let k = self.log_order_variances.len();
        Hyperparameters {
            log_order_variances: v[..k].to_vec(),
            log_length_scales: v[k..].to_vec(),
            noise: self.noise,
        }
    }
}

/// Default order-variance ladder: `1e-4` for the constant term, then
/// `0.125, 0.25, 0.5, ...` doubling per order.
pub fn default_sigma2(omega: usize) -> Vec<f64> {
    (0..=omega)
        .map(|k| if k == 0 { 1e-4 } else { 0.125 * (1 << (k - 1)) as f64 })
        .collect()
}

/// Default length scale per mode: twice the average distance between
/// neighbouring 1D grid points (on the standardized grid).
pub fn default_ell(grid: &IncompleteGrid) -> Vec<f64> {
    (0..grid.dims())
        .map(|m| {
            let coords = grid.shape().grid_1d(m);
            if coords.len() < 2 {
                return 1.0;
            }
            let max = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = coords.iter().cloned().fold(f64::INFINITY, f64::min);
            2.0 * (max - min) / (coords.len() as f64 - 1.0)
        })
        .collect()
}

/// Priors over the hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Gamma prior over each order variance (shape-scale convention).
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    /// Normal prior over each log length scale, centered at
    /// `mu0 + log sqrt(2 alpha)`.
    pub lognormal_mu0: f64,
    pub lognormal_sigma0: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            gamma_shape: 1.0,
            gamma_scale: 0.1,
            lognormal_mu0: std::f64::consts::SQRT_2,
            lognormal_sigma0: 3.0f64.sqrt(),
        }
    }
}

/// Prior log-density (constants dropped) and its gradient in log-parameter
/// space.
#[derive(Debug, Clone)]
pub struct PriorTerms {
    pub value: f64,
    pub grad_log_order_variances: Vec<f64>,
    pub grad_log_length_scales: Vec<f64>,
}

/// Evaluates the priors at the given hyperparameters. `alpha` is the
/// effective interaction order entering the length-scale prior mean.
pub fn prior_terms(hp: &Hyperparameters, spec: &PriorSpec, alpha: usize) -> PriorTerms {
    let mut value = 0.0;
    let mut grad_zeta = Vec::with_capacity(hp.log_order_variances.len());
    for &zeta in &hp.log_order_variances {
        let sigma2 = zeta.exp();
        value += (spec.gamma_shape - 1.0) * zeta - sigma2 / spec.gamma_scale;
        grad_zeta.push((spec.gamma_shape - 1.0) - sigma2 / spec.gamma_scale);
    }
    let mu = spec.lognormal_mu0 + 0.5 * ((2 * alpha.max(1)) as f64).ln();
    let s2 = spec.lognormal_sigma0 * spec.lognormal_sigma0;
    let mut grad_lambda = Vec::with_capacity(hp.log_length_scales.len());
    for &lambda in &hp.log_length_scales {
        value += -(lambda - mu) * (lambda - mu) / (2.0 * s2);
        grad_lambda.push(-(lambda - mu) / s2);
    }
    PriorTerms {
        value,
        grad_log_order_variances: grad_zeta,
        grad_log_length_scales: grad_lambda,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Fit configuration. Defaults follow the reference setup: rank-10
/// preconditioner, 35 probes, CG tolerance `1e-3`, Adam with learning rate
/// `0.1`, gradient 2-norm threshold `1e-3`, fixed noise `1e-3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub rank: usize,
    pub probes: usize,
    pub cg_tol: f64,
    /// Defaults to `min(N, 1000)` when absent.
    pub max_cg_iters: Option<usize>,
    pub learning_rate: f64,
    pub opt_tol: f64,
    pub max_cycles: usize,
    pub noise: f64,
    pub centered: bool,
    pub seed: u64,
    /// Kernel interaction range: a simple range of this order, or the full
    /// grid range when absent.
    pub kernel_cut_level: Option<usize>,
    pub workers: usize,
    pub adam: AdamParams,
    pub priors: PriorSpec,
    /// Optional initial-value overrides.
    pub sigma2_init: Option<Vec<f64>>,
    pub ell_init: Option<Vec<f64>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            rank: 10,
            probes: 35,
            cg_tol: 1e-3,
            max_cg_iters: None,
            learning_rate: 0.1,
            opt_tol: 1e-3,
            max_cycles: 500,
            noise: 1e-3,
            centered: true,
            seed: 0,
            kernel_cut_level: None,
            workers: 1,
            adam: AdamParams::default(),
            priors: PriorSpec::default(),
            sigma2_init: None,
            ell_init: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub cycles: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
    /// Normalized objective per cycle.
    pub objective_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// One objective/gradient evaluation at fixed hyperparameters.
#[derive(Debug)]
pub struct CycleOutput {
    /// Marginal log-likelihood estimate.
    pub mll: f64,
    /// Normalized objective: `mll / N` plus prior terms.
    pub objective: f64,
    /// Gradient of the objective in log-parameter space (order variances,
    /// then length scales).
    pub gradient: Vec<f64>,
    pub grad_norm: f64,
    /// `C^-1 y` at these hyperparameters.
    pub weights: McrTensor,
    pub warnings: Vec<String>,
}

/// Evaluates the normalized objective and its gradient at the given
/// hyperparameters. `cycle` indexes the probe substreams so successive
/// cycles draw fresh probes reproducibly.
pub fn objective_and_gradient(
    kernel: &AdditiveKernel,
    hp: &Hyperparameters,
    y: &McrTensor,
    config: &FitConfig,
    cycle: usize,
) -> Result<CycleOutput, GprError> {
    let grid = kernel.grid().clone();
    let n = grid.len() as f64;
    let noise = hp.noise;
    let max_cg = config.max_cg_iters.unwrap_or_else(|| grid.len().min(1000));
    let mut warnings = Vec::new();

    let precond = Preconditioner::from_kernel(kernel, config.rank, noise)?;
    let apply_c = |v: &McrTensor| fastmvp::mvp_c(kernel, noise, v).expect("nonnegative noise");

    let weights_run = krylov::pcg(&apply_c, &precond, y, config.cg_tol, max_cg)?;
    if !weights_run.converged {
        warnings.push(format!(
            "weights solve stopped at {} iterations with residual {:.3e}",
            weights_run.iterations, weights_run.relative_residual
        ));
    }
    let alpha_hat = weights_run.solution;
    let y_alpha = y.dot(&alpha_hat);

    let probes: Vec<McrTensor> = (0..config.probes)
        .map(|i| {
            let mut rng = krylov::probe_rng(
                config.seed,
                (cycle as u64) * config.probes as u64 + i as u64,
            );
            precond.sample_probe(&mut rng)
        })
        .collect();
    let runs = krylov::run_probes(
        &apply_c,
        &precond,
        &probes,
        config.cg_tol,
        max_cg,
        config.workers > 1,
    )?;
    if runs.iter().any(|r| !r.converged) {
        warnings.push("one or more probe solves did not converge".into());
    }
    let logdet = krylov::estimate_logdet(&precond, &runs);
    if logdet.clamped {
        warnings.push("clamped nonpositive Ritz values in the log-determinant".into());
    }
    let traces = krylov::estimate_trace_terms(kernel, &precond, &runs);
    let quad = fastmvp::quadratic_terms(kernel, &alpha_hat, &alpha_hat);

    let mll = -0.5 * (y_alpha + logdet.value + n * (2.0 * std::f64::consts::PI).ln());
    let alpha_eff = kernel.omega();
    let priors = prior_terms(hp, &config.priors, alpha_eff);
    let objective = mll / n + priors.value;

    let sigma2 = hp.sigma2();
    let ell = hp.ell();
    let omega = kernel.omega();
    let mut gradient = Vec::with_capacity(omega + 1 + grid.dims());
    for (k, &s) in sigma2.iter().enumerate() {
        let raw = 0.5 * quad.order_variances[k] - 0.5 * traces.total.order_variances[k];
        gradient.push(s * raw / n + priors.grad_log_order_variances[k]);
    }
    for (m, &l) in ell.iter().enumerate() {
        let raw = 0.5 * quad.length_scales[m] - 0.5 * traces.total.length_scales[m];
        gradient.push(l * raw / n + priors.grad_log_length_scales[m]);
    }
    let grad_norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();

    Ok(CycleOutput {
        mll,
        objective,
        gradient,
        grad_norm,
        weights: alpha_hat,
        warnings,
    })
}

/// A fitted model: kernel and weights over the standardized grid, plus the
/// transforms back to raw units.
#[derive(Debug)]
pub struct GprModel {
    /// Grid in raw (unstandardized) coordinates.
    pub raw_grid: Arc<IncompleteGrid>,
    /// Kernel assembled over the standardized grid.
    pub kernel: AdditiveKernel,
    pub hyperparameters: Hyperparameters,
    pub standardization: Standardization,
    /// `C^-1 y` in standardized units.
    pub weights: McrTensor,
    pub config: FitConfig,
    pub diagnostics: FitDiagnostics,
    precond: Preconditioner,
}

/// Fits a model to values on an incomplete grid.
pub fn fit(grid: Arc<IncompleteGrid>, y: &[f64], config: &FitConfig) -> Result<GprModel, GprError> {
    let (std_grid, y_std, standardization) = standardize(&grid, y)?;
    let y_tensor = McrTensor::from_vec(std_grid.clone(), y_std)?;

    let kernel_mcr = match config.kernel_cut_level {
        Some(level) => ModeCombinationRange::simple(grid.dims(), level)?,
        None => grid.mcr().clone(),
    };
    let omega = kernel_mcr.max_order();
    let sigma2_init = match &config.sigma2_init {
        Some(v) => {
            if v.len() != omega + 1 {
                return Err(GprError::InvalidArgument(format!(
                    "expected {} initial order variances, got {}",
                    omega + 1,
                    v.len()
                )));
            }
            v.clone()
        }
        None => default_sigma2(omega),
    };
    let ell_init = match &config.ell_init {
        Some(v) => {
            if v.len() != grid.dims() {
                return Err(GprError::InvalidArgument(format!(
                    "expected {} initial length scales, got {}",
                    grid.dims(),
                    v.len()
                )));
            }
            v.clone()
        }
        None => default_ell(&std_grid),
    };
    let mut hp = Hyperparameters {
        log_order_variances: sigma2_init.iter().map(|s| s.ln()).collect(),
        log_length_scales: ell_init.iter().map(|l| l.ln()).collect(),
        noise: config.noise,
    };

    let pool = if config.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| GprError::InvalidArgument(e.to_string()))?,
        )
    } else {
        None
    };
    let mut diagnostics = FitDiagnostics::default();
    let mut adam_m = vec![0.0; omega + 1 + grid.dims()];
    let mut adam_v = vec![0.0; omega + 1 + grid.dims()];
    let mut converged = false;
    for cycle in 0..config.max_cycles {
        let kernel = AdditiveKernel::assemble(
            std_grid.clone(),
            kernel_mcr.clone(),
            hp.sigma2(),
            hp.ell(),
            config.centered,
        )?;
        let out = match &pool {
            Some(p) => p.install(|| objective_and_gradient(&kernel, &hp, &y_tensor, config, cycle))?,
            None => objective_and_gradient(&kernel, &hp, &y_tensor, config, cycle)?,
        };
        diagnostics.cycles = cycle + 1;
        diagnostics.objective_trace.push(out.objective);
        diagnostics.grad_norm_trace.push(out.grad_norm);
        diagnostics.final_grad_norm = out.grad_norm;
        for w in out.warnings {
            if !diagnostics.warnings.contains(&w) {
                diagnostics.warnings.push(w);
            }
        }
        if out.grad_norm <= config.opt_tol {
            converged = true;
            break;
        }
        // Adam ascent step on the log parameters.
        let t = (cycle + 1) as i32;
        let mut x = hp.as_opt_vec();
        for (i, g) in out.gradient.iter().enumerate() {
            adam_m[i] = config.adam.beta1 * adam_m[i] + (1.0 - config.adam.beta1) * g;
            adam_v[i] = config.adam.beta2 * adam_v[i] + (1.0 - config.adam.beta2) * g * g;
            let m_hat = adam_m[i] / (1.0 - config.adam.beta1.powi(t));
            let v_hat = adam_v[i] / (1.0 - config.adam.beta2.powi(t));
            x[i] += config.learning_rate * m_hat / (v_hat.sqrt() + config.adam.epsilon);
        }
        hp = hp.with_opt_vec(&x);
    }
    diagnostics.converged = converged;
    if !converged {
        diagnostics
            .warnings
            .push(format!(
                "optimizer stopped at {} cycles with gradient norm {:.3e}",
                diagnostics.cycles, diagnostics.final_grad_norm
            ));
    }

    // Final weights at the converged hyperparameters.
    let kernel = AdditiveKernel::assemble(
        std_grid.clone(),
        kernel_mcr,
        hp.sigma2(),
        hp.ell(),
        config.centered,
    )?;
    let precond = Preconditioner::from_kernel(&kernel, config.rank, hp.noise)?;
    let apply_c = |v: &McrTensor| fastmvp::mvp_c(&kernel, hp.noise, v).expect("nonnegative noise");
    let max_cg = config.max_cg_iters.unwrap_or_else(|| std_grid.len().min(1000));
    let final_run = krylov::pcg(&apply_c, &precond, &y_tensor, config.cg_tol, max_cg)?;
    if !final_run.converged {
        diagnostics
            .warnings
            .push("final weights solve did not converge".into());
    }

    Ok(GprModel {
        raw_grid: grid,
        kernel,
        hyperparameters: hp,
        standardization,
        weights: final_run.solution,
        config: config.clone(),
        diagnostics,
        precond,
    })
}

/// A predictive variance, clamped at zero when slightly negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variance {
    pub value: f64,
    pub clamped: bool,
    /// Whether the per-point CG solve reached its tolerance.
    pub cg_converged: bool,
}

impl GprModel {
    /// Predictive mean at raw-coordinate test points.
    pub fn predict_mean(&self, points: &[Vec<f64>]) -> Result<Vec<f64>, GprError> {
        let predict_one = |x: &Vec<f64>| -> Result<f64, GprError> {
            let xs = self.standardization.standardize_point(x);
            let col = fastmvp::cross_column(&self.kernel, &xs)?;
            Ok(self
                .standardization
                .destandardize_output(col.dot(&self.weights)))
        };
        if self.config.workers > 1 {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.workers)
                .build()
                .map_err(|e| GprError::InvalidArgument(e.to_string()))?;
            pool.install(|| points.par_iter().map(predict_one).collect())
        } else {
            points.iter().map(predict_one).collect()
        }
    }

    /// Predictive variance at one raw-coordinate test point (one CG solve).
    /// Returned in raw output units.
    pub fn predict_variance(&self, x: &[f64]) -> Result<Variance, GprError> {
        let xs = self.standardization.standardize_point(x);
        let col = fastmvp::cross_column(&self.kernel, &xs)?;
        let kss = fastmvp::test_test_value(&self.kernel, &xs)?;
        let noise = self.hyperparameters.noise;
        let apply_c =
            |v: &McrTensor| fastmvp::mvp_c(&self.kernel, noise, v).expect("nonnegative noise");
        let max_cg = self
            .config
            .max_cg_iters
            .unwrap_or_else(|| self.kernel.grid().len().min(1000));
        let run = krylov::pcg(&apply_c, &self.precond, &col, self.config.cg_tol, max_cg)?;
        let raw = kss - col.dot(&run.solution);
        let scale2 = self.standardization.output_scale * self.standardization.output_scale;
        if raw < 0.0 {
            Ok(Variance {
                value: 0.0,
                clamped: raw < -1e-8,
                cg_converged: run.converged,
            })
        } else {
            Ok(Variance {
                value: raw * scale2,
                clamped: false,
                cg_converged: run.converged,
            })
        }
    }

    /// Predictive variances at several points, one CG solve each,
    /// parallelized over points when the config asks for workers.
    pub fn predict_variances(&self, points: &[Vec<f64>]) -> Result<Vec<Variance>, GprError> {
        if self.config.workers > 1 {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.workers)
                .build()
                .map_err(|e| GprError::InvalidArgument(e.to_string()))?;
            pool.install(|| points.par_iter().map(|x| self.predict_variance(x)).collect())
        } else {
            points.iter().map(|x| self.predict_variance(x)).collect()
        }
    }

    /// Recomputes weights for the stored hyperparameters against raw
    /// targets `y`, optionally at a different noise variance.
    pub fn refit_weights(&self, y: &[f64], noise: Option<f64>) -> Result<GprModel, GprError> {
        let grid = self.kernel.grid().clone();
        if y.len() != grid.len() {
            return Err(GprError::InvalidArgument(format!(
                "expected {} outputs, got {}",
                grid.len(),
                y.len()
            )));
        }
        let noise = noise.unwrap_or(self.hyperparameters.noise);
        if noise <= 0.0 || noise.is_nan() {
            return Err(GprError::InvalidArgument(
                "noise variance must be positive".into(),
            ));
        }
        let y_std: Vec<f64> = y
            .iter()
            .map(|v| (v - self.standardization.output_shift) / self.standardization.output_scale)
            .collect();
        let y_tensor = McrTensor::from_vec(grid.clone(), y_std)?;
        let precond = Preconditioner::from_kernel(&self.kernel, self.config.rank, noise)?;
        let apply_c =
            |v: &McrTensor| fastmvp::mvp_c(&self.kernel, noise, v).expect("nonnegative noise");
        let run = krylov::pcg(&apply_c, &precond, &y_tensor, self.config.cg_tol, grid.len())?;
        let mut hp = self.hyperparameters.clone();
        hp.noise = noise;
        let mut diagnostics = self.diagnostics.clone();
        if !run.converged {
            diagnostics
                .warnings
                .push("refit weights solve did not converge".into());
        }
        Ok(GprModel {
            raw_grid: self.raw_grid.clone(),
            kernel: self.kernel.clone(),
            hyperparameters: hp,
            standardization: self.standardization.clone(),
            weights: run.solution,
            config: self.config.clone(),
            diagnostics,
            precond,
        })
    }

    /// Serializes to a JSON model file plus a binary weights sidecar next
    /// to it.
    pub fn save(&self, path: &Path) -> Result<(), GprError> {
        let sidecar_name = path
            .file_stem()
            .map(|s| format!("{}.bin", s.to_string_lossy()))
            .unwrap_or_else(|| "weights.bin".into());
        let sidecar_path = path.with_file_name(&sidecar_name);
        let digest = files::write_f64_sidecar(&sidecar_path, self.weights.as_slice())
            .map_err(GprError::File)?;
        let file = ModelFile {
            format_version: 1,
            grid: GridDescription::from_grid(&self.raw_grid),
            kernel_mcr: self
                .kernel
                .kernel_mcr()
                .iter()
                .map(|mc| mc.modes().map(|m| m + 1).collect())
                .collect(),
            hyperparameters: HyperparametersFile {
                order_variances: self.hyperparameters.sigma2(),
                length_scales: self.hyperparameters.ell(),
                noise: self.hyperparameters.noise,
            },
            standardization: self.standardization.clone(),
            config: self.config.clone(),
            diagnostics: self.diagnostics.clone(),
            weights: WeightsRef {
                path: sidecar_name,
                digest,
                count: self.weights.len() as u64,
            },
        };
        let json = serde_json::to_string_pretty(&file).map_err(FileError::Json)?;
        std::fs::write(path, json).map_err(FileError::Io)?;
        Ok(())
    }

    /// Loads a model file, rebuilding the standardized kernel and verifying
    /// the weights digest.
    pub fn load(path: &Path) -> Result<GprModel, GprError> {
        let text = std::fs::read_to_string(path).map_err(FileError::Io)?;
        let file: ModelFile = serde_json::from_str(&text).map_err(FileError::Json)?;
        let raw_grid = file.grid.build()?;
        let dims = raw_grid.dims();
        let std_shape = raw_grid.shape().transformed(
            &file.standardization.input_shift,
            &file.standardization.input_scale,
        );
        let std_grid = IncompleteGrid::new(std_shape, raw_grid.mcr().clone())?;
        let mut mcs = Vec::with_capacity(file.kernel_mcr.len());
        for list in &file.kernel_mcr {
            let zero_based: Vec<usize> = list
                .iter()
                .map(|&m| {
                    if m == 0 {
                        Err(FileError::Malformed("kernel modes are 1-based".into()))
                    } else {
                        Ok(m - 1)
                    }
                })
                .collect::<Result<_, _>>()?;
            mcs.push(crate::grid::ModeCombination::new(&zero_based, dims)?);
        }
        let kernel_mcr = ModeCombinationRange::new(dims, mcs)?;
        let hp = Hyperparameters {
            log_order_variances: file
                .hyperparameters
                .order_variances
                .iter()
                .map(|s| s.ln())
                .collect(),
            log_length_scales: file
                .hyperparameters
                .length_scales
                .iter()
                .map(|l| l.ln())
                .collect(),
            noise: file.hyperparameters.noise,
        };
        let kernel = AdditiveKernel::assemble(
            std_grid.clone(),
            kernel_mcr,
            file.hyperparameters.order_variances.clone(),
            file.hyperparameters.length_scales.clone(),
            file.config.centered,
        )?;
        let sidecar_path = path.with_file_name(&file.weights.path);
        let values = files::read_f64_sidecar(&sidecar_path, Some(&file.weights.digest))?;
        if values.len() as u64 != file.weights.count {
            return Err(GprError::File(FileError::Malformed(
                "weights count mismatch".into(),
            )));
        }
        let weights = McrTensor::from_vec(std_grid, values)?;
        let precond = Preconditioner::from_kernel(&kernel, file.config.rank, hp.noise)?;
        Ok(GprModel {
            raw_grid,
            kernel,
            hyperparameters: hp,
            standardization: file.standardization,
            weights,
            config: file.config,
            diagnostics: file.diagnostics,
            precond,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HyperparametersFile {
    order_variances: Vec<f64>,
    length_scales: Vec<f64>,
    noise: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsRef {
    path: String,
    digest: String,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    grid: GridDescription,
    kernel_mcr: Vec<Vec<usize>>,
    hyperparameters: HyperparametersFile,
    standardization: Standardization,
    config: FitConfig,
    diagnostics: FitDiagnostics,
    weights: WeightsRef,
}
