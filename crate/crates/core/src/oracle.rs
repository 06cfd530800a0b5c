//! Dense brute-force reference implementations used by tests and
//! validation: pairwise kernel assembly, explicit Kronecker/chopping
//! algebra, and dense GPR with exact gradients.
//!
//! Everything here favors directness over speed and is capped to desk-scale
//! sizes. Compiled only with the `oracle` feature.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::gpr::{prior_terms, FitConfig, Hyperparameters};
use crate::grid::{IncompleteGrid, McrTensor};
use crate::kernel::{AdditiveKernel, HyperParam, HyperValues};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance size {size} exceeds the oracle cap {cap}")]
    CapExceeded { size: u64, cap: u64 },
    #[error("matrix is not positive definite")]
    NotSpd,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Default cap on the incomplete-grid size for dense `N x N` work.
pub const DEFAULT_PAIRWISE_CAP: u64 = 5000;
/// Default cap on the complete-grid size for explicit chopping work.
pub const DEFAULT_COMPLETE_CAP: u64 = 1_000_000;

/// Full multi-indices (one entry per mode) of every incomplete-grid point,
/// canonical order. Undisplaced modes carry index 0.
pub fn multi_indices(grid: &IncompleteGrid) -> Vec<Vec<usize>> {
    let dims = grid.dims();
    let mut out = Vec::with_capacity(grid.len());
    for (id, mc) in grid.mcr().iter().enumerate() {
        let modes: Vec<usize> = mc.modes().collect();
        let extents: Vec<usize> = modes
            .iter()
            .map(|&m| grid.shape().grid_1d(m).len() - 1)
            .collect();
        let size = grid.subtensor_len(id);
        for within in 0..size {
            let mut idx = vec![0usize; dims];
            let mut rem = within;
            for axis in (0..modes.len()).rev() {
                idx[modes[axis]] = rem % extents[axis] + 1;
                rem /= extents[axis];
            }
            out.push(idx);
        }
    }
    out
}

/// Row-major complete-grid position of each incomplete-grid point
/// (canonical order). This is the column selection of the chopping matrix.
pub fn complete_positions(grid: &IncompleteGrid) -> Vec<usize> {
    let sizes = grid.shape().sizes();
    let dims = grid.dims();
    let mut strides = vec![1usize; dims];
    for d in (0..dims.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * sizes[d + 1];
    }
    multi_indices(grid)
        .iter()
        .map(|idx| idx.iter().zip(&strides).map(|(i, s)| i * s).sum())
        .collect()
}

/// Selects rows and columns of a complete-grid matrix (`Gamma^T A Gamma`).
pub fn chop_matrix(full: &DMatrix<f64>, positions: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(positions.len(), positions.len(), |i, j| {
        full[(positions[i], positions[j])]
    })
}

/// Pairwise dense kernel matrix: entry `(i, j)` sums the per-term products
/// of (optionally centered) base-matrix entries.
pub fn dense_pairwise(kernel: &AdditiveKernel, cap: u64) -> Result<DMatrix<f64>, OracleError> {
    dense_weighted(kernel, cap, None)
}

/// Pairwise dense derivative matrix `dK/dtheta` (zero matrix for the noise
/// parameter would be the identity times nothing; ask for `dC` instead).
pub fn dense_derivative(
    kernel: &AdditiveKernel,
    param: HyperParam,
    cap: u64,
) -> Result<DMatrix<f64>, OracleError> {
    match param {
        HyperParam::Noise => {
            let n = kernel.grid().len();
            check_cap(n as u64, cap)?;
            Ok(DMatrix::identity(n, n))
        }
        _ => dense_weighted(kernel, cap, Some(param)),
    }
}

fn check_cap(size: u64, cap: u64) -> Result<(), OracleError> {
    if size > cap {
        return Err(OracleError::CapExceeded { size, cap });
    }
    Ok(())
}

fn dense_weighted(
    kernel: &AdditiveKernel,
    cap: u64,
    deriv: Option<HyperParam>,
) -> Result<DMatrix<f64>, OracleError> {
    let grid = kernel.grid();
    let n = grid.len();
    check_cap(n as u64, cap)?;
    let idx = multi_indices(grid);
    let mut out = DMatrix::zeros(n, n);
    for term in 0..kernel.term_count() {
        let order = kernel.term_order(term);
        let modes: Vec<usize> = kernel.term_modes(term).collect();
        let (scale, deriv_mode) = match deriv {
            None => (kernel.sigma2()[order], None),
            Some(HyperParam::OrderVariance(k)) => {
                if order != k {
                    continue;
                }
                (1.0, None)
            }
            Some(HyperParam::LengthScale(m)) => {
                if !modes.contains(&m) {
                    continue;
                }
                (kernel.sigma2()[order], Some(m))
            }
            Some(HyperParam::Noise) => unreachable!(),
        };
        if scale == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in i..n {
                let mut v = scale;
                for &m in &modes {
                    let b = kernel.base(m);
                    v *= if deriv_mode == Some(m) {
                        b.deriv()[(idx[i][m], idx[j][m])]
                    } else {
                        b.k(idx[i][m], idx[j][m])
                    };
                }
                out[(i, j)] += v;
                if i != j {
                    out[(j, i)] += v;
                }
            }
        }
    }
    Ok(out)
}

/// Chopped-Kronecker dense kernel: builds the complete-grid matrix as a sum
/// of explicit Kronecker bracket products, then deletes the rows and
/// columns outside the incomplete grid.
pub fn dense_chopped_kronecker(
    kernel: &AdditiveKernel,
    complete_cap: u64,
) -> Result<DMatrix<f64>, OracleError> {
    let grid = kernel.grid();
    let sizes = grid.shape().sizes();
    let complete: u64 = sizes.iter().map(|&s| s as u64).product();
    check_cap(complete, complete_cap)?;
    let n = complete as usize;
    let mut acc = DMatrix::zeros(n, n);
    for term in 0..kernel.term_count() {
        let sig = kernel.sigma2()[kernel.term_order(term)];
        if sig == 0.0 {
            continue;
        }
        let modes: Vec<usize> = kernel.term_modes(term).collect();
        let mut cur = DMatrix::from_element(1, 1, sig);
        for (d, &nd) in sizes.iter().enumerate() {
            let factor = if modes.contains(&d) {
                kernel.base(d).matrix().clone()
            } else {
                DMatrix::from_element(nd, nd, 1.0)
            };
            cur = cur.kronecker(&factor);
        }
        acc += cur;
    }
    let positions = complete_positions(grid);
    Ok(chop_matrix(&acc, &positions))
}

/// Matrix-free chopped-Kronecker oracle product: embeds `v` into the
/// complete grid, applies each kernel term as a sequence of complete-grid
/// one-mode products (base matrix or all-ones factor), and chops the
/// result. Independent of the incomplete-grid contraction machinery.
pub fn complete_mvp_chopped(
    kernel: &AdditiveKernel,
    v: &McrTensor,
    complete_cap: u64,
) -> Result<McrTensor, OracleError> {
    let grid = kernel.grid();
    let sizes = grid.shape().sizes();
    let complete: u64 = sizes.iter().map(|&s| s as u64).product();
    check_cap(complete, complete_cap)?;
    let n = complete as usize;
    let positions = complete_positions(grid);
    let mut embedded = vec![0.0; n];
    for (slot, &pos) in positions.iter().enumerate() {
        embedded[pos] = v.as_slice()[slot];
    }
    let mut total = vec![0.0; n];
    let mut work = vec![0.0; n];
    let mut cur = vec![0.0; n];
    for term in 0..kernel.term_count() {
        let sig = kernel.sigma2()[kernel.term_order(term)];
        if sig == 0.0 {
            continue;
        }
        let modes: Vec<usize> = kernel.term_modes(term).collect();
        cur.copy_from_slice(&embedded);
        for (d, &nd) in sizes.iter().enumerate() {
            let outer: usize = sizes[..d].iter().product();
            let inner: usize = sizes[d + 1..].iter().product();
            work[..n].fill(0.0);
            if modes.contains(&d) {
                let k = kernel.base(d).matrix();
                for o in 0..outer {
                    for b in 0..nd {
                        for c in 0..nd {
                            let w = k[(b, c)];
                            if w == 0.0 {
                                continue;
                            }
                            let src = (o * nd + c) * inner;
                            let dst = (o * nd + b) * inner;
                            for i in 0..inner {
                                work[dst + i] += w * cur[src + i];
                            }
                        }
                    }
                }
            } else {
                // All-ones factor: column sums broadcast to every row.
                for o in 0..outer {
                    let dst0 = o * nd * inner;
                    for c in 0..nd {
                        let src = (o * nd + c) * inner;
                        for i in 0..inner {
                            work[dst0 + i] += cur[src + i];
                        }
                    }
                    for b in 1..nd {
                        let (head, tail) = work.split_at_mut(dst0 + b * inner);
                        tail[..inner].copy_from_slice(&head[dst0..dst0 + inner]);
                    }
                }
            }
            std::mem::swap(&mut cur, &mut work);
        }
        for (t, &c) in total.iter_mut().zip(&cur) {
            *t += sig * c;
        }
    }
    let chopped: Vec<f64> = positions.iter().map(|&p| total[p]).collect();
    Ok(McrTensor::from_vec(grid.clone(), chopped).unwrap())
}

/// Dense GPR pieces computed by Cholesky factorization.
pub struct DenseGpr {
    pub c: DMatrix<f64>,
    pub chol: Cholesky<f64, nalgebra::Dyn>,
    pub alpha: DVector<f64>,
    pub mll: f64,
    pub logdet: f64,
}

pub fn dense_gpr(
    kernel: &AdditiveKernel,
    noise: f64,
    y: &[f64],
    cap: u64,
) -> Result<DenseGpr, OracleError> {
    let n = kernel.grid().len();
    check_cap(n as u64, cap)?;
    if y.len() != n {
        return Err(OracleError::InvalidArgument(format!(
            "expected {n} outputs, got {}",
            y.len()
        )));
    }
    let k = dense_pairwise(kernel, cap)?;
    let c = &k + DMatrix::identity(n, n) * noise;
    let chol = Cholesky::new(c.clone()).ok_or(OracleError::NotSpd)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mll = -0.5 * (yv.dot(&alpha) + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln());
    Ok(DenseGpr {
        c,
        chol,
        alpha,
        mll,
        logdet,
    })
}

impl DenseGpr {
    /// Exact `tr(C^-1 dC/dtheta)` and quadratic terms for every
    /// hyperparameter, plus the resulting MLL gradient (raw parameters).
    pub fn gradient(&self, kernel: &AdditiveKernel, cap: u64) -> Result<HyperValues, OracleError> {
        let n = self.c.nrows();
        let cinv = self.chol.inverse();
        let mut out = HyperValues::zeros(kernel.omega(), kernel.grid().dims());
        for param in out.params() {
            let (quad, trace) = match param {
                HyperParam::Noise => {
                    let q = self.alpha.dot(&self.alpha);
                    let t = cinv.trace();
                    (q, t)
                }
                _ => {
                    let dc = dense_derivative(kernel, param, cap)?;
                    let q = self.alpha.dot(&(&dc * &self.alpha));
                    let t = cinv.component_mul(&dc).sum();
                    (q, t)
                }
            };
            out.set(param, 0.5 * quad - 0.5 * trace);
            let _ = n;
        }
        Ok(out)
    }

    /// Predictive mean and variance from dense solves.
    pub fn predict(&self, k_star: &DVector<f64>, k_starstar: f64) -> (f64, f64) {
        let mean = k_star.dot(&self.alpha);
        let sol = self.chol.solve(k_star);
        (mean, k_starstar - k_star.dot(&sol))
    }
}

/// Dense normalized objective and its gradient in log-parameter space,
/// sharing the prior terms with the iterative path. The reference for
/// finite-difference gradient checks.
pub fn dense_objective(
    kernel: &AdditiveKernel,
    hp: &Hyperparameters,
    y: &[f64],
    config: &FitConfig,
    cap: u64,
) -> Result<(f64, Vec<f64>), OracleError> {
    let n = kernel.grid().len() as f64;
    let dense = dense_gpr(kernel, hp.noise, y, cap)?;
    let grads = dense.gradient(kernel, cap)?;
    let priors = prior_terms(hp, &config.priors, kernel.omega());
    let value = dense.mll / n + priors.value;
    let sigma2 = hp.sigma2();
    let ell = hp.ell();
    let mut grad = Vec::new();
    for (k, &s) in sigma2.iter().enumerate() {
        grad.push(s * grads.order_variances[k] / n + priors.grad_log_order_variances[k]);
    }
    for (m, &l) in ell.iter().enumerate() {
        grad.push(l * grads.length_scales[m] / n + priors.grad_log_length_scales[m]);
    }
    Ok((value, grad))
}
