//! Preconditioned conjugate gradients with Lanczos-tridiagonal extraction,
//! stochastic Lanczos quadrature for the log-determinant, and trace-term
//! estimation with preconditioner variance reduction.
//!
//! One CG run per probe yields both the linear solve and the tridiagonal
//! matrix of the preconditioned operator; the preconditioner enters only
//! through inverse products, never through its Cholesky factor.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::fastmvp::{self, apply_u_inplace};
use crate::grid::McrTensor;
use crate::kernel::{AdditiveKernel, HyperValues};
use crate::precond::Preconditioner;

#[derive(Debug, Error)]
pub enum KrylovError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical breakdown in the CG recurrence: {0}")]
    Breakdown(String),
}

/// Counter-based generator for one probe: substream `probe_index` of `seed`.
/// Parallel probe draws are reproducible regardless of scheduling.
pub fn probe_rng(seed: u64, probe_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(probe_index);
    rng
}

/// Outcome of one preconditioned CG run.
#[derive(Debug, Clone)]
pub struct PcgResult {
    pub solution: McrTensor,
    pub iterations: usize,
    /// Preconditioned relative residual at exit.
    pub relative_residual: f64,
    pub converged: bool,
    /// Diagonal of the Lanczos tridiagonal matrix of the preconditioned
    /// operator, recovered from the CG coefficients.
    pub tridiag_main: Vec<f64>,
    /// Off-diagonal (one entry shorter).
    pub tridiag_off: Vec<f64>,
}

/// Solves `C x = b` by preconditioned CG, recovering the Lanczos
/// tridiagonal matrix from the CG coefficients. Convergence is declared on
/// the preconditioned residual: `|P^-1 r| / |P^-1 b| <= tol`. Exceeding
/// `max_iters` returns the current iterate flagged as non-converged.
pub fn pcg<F>(
    apply_c: &F,
    precond: &Preconditioner,
    b: &McrTensor,
    tol: f64,
    max_iters: usize,
) -> Result<PcgResult, KrylovError>
where
    F: Fn(&McrTensor) -> McrTensor + ?Sized,
{
    if tol <= 0.0 || tol.is_nan() {
        return Err(KrylovError::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let mut x = McrTensor::zeros(b.grid().clone());
    let mut r = b.clone();
    let mut z = precond.solve(&r);
    let denom = z.norm();
    if denom == 0.0 {
        return Ok(PcgResult {
            solution: x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
            tridiag_main: Vec::new(),
            tridiag_off: Vec::new(),
        });
    }
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut rel = 1.0;
    let mut iterations = 0;
    for it in 0..max_iters {
        let ap = apply_c(&p);
        let pap = p.dot(&ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(KrylovError::Breakdown(format!(
                "p^T C p = {pap} at iteration {it}"
            )));
        }
        let alpha = rz / pap;
        if !alpha.is_finite() {
            return Err(KrylovError::Breakdown(format!(
                "step length is not finite at iteration {it}"
            )));
        }
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        alphas.push(alpha);
        iterations = it + 1;
        z = precond.solve(&r);
        let rz_new = r.dot(&z);
        if !rz_new.is_finite() {
            return Err(KrylovError::Breakdown(format!(
                "residual inner product is not finite at iteration {it}"
            )));
        }
        rel = z.norm() / denom;
        if rel <= tol {
            converged = true;
            break;
        }
        if it + 1 < max_iters {
            let beta = rz_new / rz;
            betas.push(beta);
            p.scale(beta);
            p.axpy(1.0, &z);
            rz = rz_new;
        }
    }
    let ell = iterations;
    let mut main = vec![0.0; ell];
    let mut off = vec![0.0; ell.saturating_sub(1)];
    for j in 0..ell {
        main[j] = 1.0 / alphas[j];
        if j > 0 {
            main[j] += betas[j - 1] / alphas[j - 1];
        }
        if j + 1 < ell {
            off[j] = betas[j].max(0.0).sqrt() / alphas[j];
        }
    }
    Ok(PcgResult {
        solution: x,
        iterations,
        relative_residual: rel,
        converged,
        tridiag_main: main,
        tridiag_off: off,
    })
}

/// One Lanczos-quadrature contribution `(b^T P^-1 b) e_0^T log(T) e_0`,
/// computed by diagonalizing the symmetric tridiagonal matrix. Nonpositive
/// Ritz values are clamped at `1e-300` and flagged.
pub fn logdet_quadrature(main: &[f64], off: &[f64], b_pinv_b: f64) -> (f64, bool) {
    let ell = main.len();
    if ell == 0 {
        return (0.0, false);
    }
    let mut t = DMatrix::zeros(ell, ell);
    for j in 0..ell {
        t[(j, j)] = main[j];
        if j + 1 < ell {
            t[(j, j + 1)] = off[j];
            t[(j + 1, j)] = off[j];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut acc = 0.0;
    let mut clamped = false;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let tau = eig.eigenvectors[(0, i)];
        let lam = if lambda <= 0.0 {
            clamped = true;
            1e-300
        } else {
            lambda
        };
        acc += tau * tau * lam.ln();
    }
    (b_pinv_b * acc, clamped)
}

/// Everything one probe produces from a single CG run.
#[derive(Debug, Clone)]
pub struct ProbeRun {
    /// `C^-1 b`
    pub solution: McrTensor,
    /// `P^-1 b`
    pub pinv_b: McrTensor,
    /// `b^T P^-1 b`
    pub b_pinv_b: f64,
    pub tridiag_main: Vec<f64>,
    pub tridiag_off: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs one CG solve per probe vector, reusing each run for both the solve
/// and the tridiagonal matrix. Probes are independent; with `parallel` they
/// run on the current thread pool and are reduced in probe order, so
/// results do not depend on scheduling.
pub fn run_probes<F>(
    apply_c: &F,
    precond: &Preconditioner,
    probes: &[McrTensor],
    tol: f64,
    max_iters: usize,
    parallel: bool,
) -> Result<Vec<ProbeRun>, KrylovError>
where
    F: Fn(&McrTensor) -> McrTensor + Sync,
{
    let run_one = |b: &McrTensor| -> Result<ProbeRun, KrylovError> {
        let pinv_b = precond.solve(b);
        let b_pinv_b = b.dot(&pinv_b);
        let res = pcg(apply_c, precond, b, tol, max_iters)?;
        Ok(ProbeRun {
            solution: res.solution,
            pinv_b,
            b_pinv_b,
            tridiag_main: res.tridiag_main,
            tridiag_off: res.tridiag_off,
            iterations: res.iterations,
            converged: res.converged,
        })
    };
    if parallel {
        probes.par_iter().map(run_one).collect()
    } else {
        probes.iter().map(run_one).collect()
    }
}

/// A mean with its standard error (0 when fewer than two samples).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub sem: f64,
}

fn mean_and_sem(samples: &[f64]) -> Estimate {
    let m = samples.len();
    if m == 0 {
        return Estimate {
            value: 0.0,
            sem: 0.0,
        };
    }
    let mean = samples.iter().sum::<f64>() / m as f64;
    if m < 2 {
        return Estimate {
            value: mean,
            sem: 0.0,
        };
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m as f64 - 1.0);
    Estimate {
        value: mean,
        sem: (var / m as f64).sqrt(),
    }
}

/// Log-determinant estimate from probe runs.
#[derive(Debug, Clone)]
pub struct LogdetEstimate {
    /// `log|P|` plus the stochastic remainder estimate.
    pub value: f64,
    /// Standard error of the remainder mean.
    pub sem: f64,
    /// Deterministic part `log|P|`.
    pub logdet_p: f64,
    /// Per-probe remainder samples.
    pub samples: Vec<f64>,
    /// True if any Ritz value had to be clamped.
    pub clamped: bool,
}

/// `log|C| = log|P| + E[(b^T P^-1 b) e_0^T log(T) e_0]` over probes with
/// `E[b b^T] = P`.
pub fn estimate_logdet(precond: &Preconditioner, runs: &[ProbeRun]) -> LogdetEstimate {
    let mut samples = Vec::with_capacity(runs.len());
    let mut clamped = false;
    for run in runs {
        let (v, c) = logdet_quadrature(&run.tridiag_main, &run.tridiag_off, run.b_pinv_b);
        samples.push(v);
        clamped |= c;
    }
    let est = mean_and_sem(&samples);
    LogdetEstimate {
        value: precond.logdet() + est.value,
        sem: est.sem,
        logdet_p: precond.logdet(),
        samples,
        clamped,
    }
}

/// Trace-term estimates for every hyperparameter.
#[derive(Debug, Clone)]
pub struct TraceTermEstimates {
    /// Deterministic part plus stochastic remainder mean, per parameter.
    pub total: HyperValues,
    /// Standard error of the remainder mean, per parameter.
    pub sem: HyperValues,
    /// Deterministic preconditioner part `tr(P^-1 dP/dtheta)`.
    pub deterministic: HyperValues,
}

/// Variance-reduced Girard-Hutchinson estimate of
/// `tr(C^-1 dC/dtheta)` for all hyperparameters:
/// the deterministic `tr(P^-1 dP/dtheta)` plus the estimated bracket
/// `E[b^T C^-1 dC/dtheta P^-1 b - b^T P^-1 dP/dtheta P^-1 b]`.
///
/// All bilinear forms go through the shared factor-chain batching, so one
/// probe costs `O(n alpha^2 N)` across all length scales.
pub fn estimate_trace_terms(
    kernel: &AdditiveKernel,
    precond: &Preconditioner,
    runs: &[ProbeRun],
) -> TraceTermEstimates {
    let grid = kernel.grid().clone();
    let deterministic = precond.trace_terms(kernel);
    let omega = kernel.omega();
    let dims = grid.dims();
    let mut per_probe: Vec<HyperValues> = Vec::with_capacity(runs.len());
    for run in runs {
        let mut u_x = run.solution.clone();
        apply_u_inplace(grid.as_ref(), u_x.as_mut_slice());
        let mut u_pb = run.pinv_b.clone();
        apply_u_inplace(grid.as_ref(), u_pb.as_mut_slice());

        // C part: x^T dC/dtheta (P^-1 b).
        let mut v = fastmvp::m_bilinear(kernel, &u_x, &u_pb);
        v.noise = run.solution.dot(&run.pinv_b);

        // P part at fixed pivots: 2 pb^T dA g - g^T dB g, g = B^-1 A^T pb.
        if precond.rank() > 0 {
            let g = precond.nystrom_coeffs(&run.pinv_b);
            let mut h = precond.scatter_pivots(&g);
            apply_u_inplace(grid.as_ref(), h.as_mut_slice());
            let p1 = fastmvp::m_bilinear(kernel, &u_pb, &h);
            let p2 = fastmvp::m_bilinear(kernel, &h, &h);
            v.axpy(-2.0, &p1);
            v.axpy(1.0, &p2);
        }
        v.noise -= run.pinv_b.dot(&run.pinv_b);
        per_probe.push(v);
    }

    let mut total = deterministic.clone();
    let mut sem = HyperValues::zeros(omega, dims);
    let mut params = Vec::new();
    params.extend(
        (0..=omega)
            .map(crate::kernel::HyperParam::OrderVariance)
            .chain((0..dims).map(crate::kernel::HyperParam::LengthScale))
            .chain(std::iter::once(crate::kernel::HyperParam::Noise)),
    );
    for param in params {
        let samples: Vec<f64> = per_probe.iter().map(|v| v.get(param)).collect();
        let est = mean_and_sem(&samples);
        total.set(param, deterministic.get(param) + est.value);
        sem.set(param, est.sem);
    }
    TraceTermEstimates {
        total,
        sem,
        deterministic,
    }
}
