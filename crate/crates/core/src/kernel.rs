//! Base (1D) kernel evaluation, empirical centering, additive-kernel
//! assembly, and the per-mode factor data (down/up/forward/passive blocks
//! of `M = L^-1 K U^-1`) that the fast MVP consumes.
//!
//! `L = I + D` and `U = I + S` have the closed-form inverses `I - D` and
//! `I - S` (both `D` and `S` are nilpotent), so `M = (I - D) K (I - S)` is
//! materialized densely per mode. Centering follows the empirical
//! (frequency) distribution of the training grid; derivative matrices of
//! centered kernels are differentiated analytically.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::fastmvp::OneModeBlocks;
use crate::grid::{IncompleteGrid, ModeCombinationRange};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),
    #[error("degenerate centering on mode {mode}: w^T K w = {value:.3e}")]
    DegenerateCentering { mode: usize, value: f64 },
}

/// Identifies one kernel hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperParam {
    /// Interaction-order variance `sigma_k^2`.
    OrderVariance(usize),
    /// Per-mode length scale `l^(m)`.
    LengthScale(usize),
    /// The noise variance added on the diagonal.
    Noise,
}

/// One value per hyperparameter, in the fixed order: order variances by
/// order, then length scales by mode, then noise.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperValues {
    pub order_variances: Vec<f64>,
    pub length_scales: Vec<f64>,
    pub noise: f64,
}

impl HyperValues {
    pub fn zeros(omega: usize, dims: usize) -> Self {
        HyperValues {
            order_variances: vec![0.0; omega + 1],
            length_scales: vec![0.0; dims],
            noise: 0.0,
        }
    }

    pub fn get(&self, param: HyperParam) -> f64 {
        match param {
            HyperParam::OrderVariance(k) => self.order_variances[k],
            HyperParam::LengthScale(m) => self.length_scales[m],
            HyperParam::Noise => self.noise,
        }
    }

    pub fn set(&mut self, param: HyperParam, value: f64) {
        match param {
            HyperParam::OrderVariance(k) => self.order_variances[k] = value,
            HyperParam::LengthScale(m) => self.length_scales[m] = value,
            HyperParam::Noise => self.noise = value,
        }
    }

    /// Parameters in fixed order.
    pub fn params(&self) -> Vec<HyperParam> {
        let mut out = Vec::with_capacity(self.order_variances.len() + self.length_scales.len() + 1);
        for k in 0..self.order_variances.len() {
            out.push(HyperParam::OrderVariance(k));
        }
        for m in 0..self.length_scales.len() {
            out.push(HyperParam::LengthScale(m));
        }
        out.push(HyperParam::Noise);
        out
    }

    /// `self += scale * other`, entrywise.
    pub fn axpy(&mut self, scale: f64, other: &HyperValues) {
        for (a, b) in self
            .order_variances
            .iter_mut()
            .zip(&other.order_variances)
        {
            *a += scale * b;
        }
        for (a, b) in self.length_scales.iter_mut().zip(&other.length_scales) {
            *a += scale * b;
        }
        self.noise += scale * other.noise;
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.order_variances {
            *a *= factor;
        }
        for a in &mut self.length_scales {
            *a *= factor;
        }
        self.noise *= factor;
    }
}

/// A 1D kernel family parameterized by a length scale. Implementations must
/// be symmetric in their arguments.
pub trait BaseKernel: Send + Sync {
    fn eval(&self, x: f64, y: f64, ell: f64) -> f64;
    /// Elementwise derivative with respect to the length scale.
    fn deriv_ell(&self, x: f64, y: f64, ell: f64) -> f64;
}

/// `k(x, y) = exp(-(x - y)^2 / (2 l^2))`: smooth, unit diagonal.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredExponential;

impl BaseKernel for SquaredExponential {
    fn eval(&self, x: f64, y: f64, ell: f64) -> f64 {
        let d = x - y;
        (-d * d / (2.0 * ell * ell)).exp()
    }

    fn deriv_ell(&self, x: f64, y: f64, ell: f64) -> f64 {
        let d = x - y;
        self.eval(x, y, ell) * d * d / (ell * ell * ell)
    }
}

/// Evaluates the base matrix over a 1D grid.
pub fn base_matrix(grid_1d: &[f64], ell: f64) -> Result<DMatrix<f64>, KernelError> {
    base_matrix_with(&SquaredExponential, grid_1d, ell).map(|(k, _)| k)
}

/// Evaluates the base matrix and its length-scale derivative over a 1D grid.
pub fn base_matrix_with(
    kernel: &dyn BaseKernel,
    grid_1d: &[f64],
    ell: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), KernelError> {
    if ell <= 0.0 || ell.is_nan() {
        return Err(KernelError::InvalidArgument(format!(
            "length scale must be positive, got {ell}"
        )));
    }
    let n = grid_1d.len();
    let k = DMatrix::from_fn(n, n, |i, j| kernel.eval(grid_1d[i], grid_1d[j], ell));
    let dk = DMatrix::from_fn(n, n, |i, j| kernel.deriv_ell(grid_1d[i], grid_1d[j], ell));
    Ok((k, dk))
}

/// Per-mode empirical frequency vectors: entry `j` counts the grid points
/// whose mode-`m` index equals `j`. Entries sum to the grid size; the
/// reference index is the most frequent.
pub fn centering_weights(grid: &IncompleteGrid) -> Vec<Vec<f64>> {
    (0..grid.dims()).map(|m| grid.mode_value_counts(m)).collect()
}

/// Degenerate-centering threshold relative to the number of grid points.
const CENTERING_TOL: f64 = 1e-14;

/// Centered train-train, train-test and test-test blocks.
pub type CenteredBlocks = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

/// Centers the train-train, train-test and test-test blocks under the
/// frequency vector `w` by the shared rank-one update.
pub fn center(
    k: &DMatrix<f64>,
    k_star: &DMatrix<f64>,
    k_starstar: &DMatrix<f64>,
    w: &[f64],
) -> Result<CenteredBlocks, KernelError> {
    let w = DVector::from_column_slice(w);
    let g = k * &w;
    let s = w.dot(&g);
    let total: f64 = w.sum();
    if s <= CENTERING_TOL * total {
        return Err(KernelError::DegenerateCentering { mode: 0, value: s });
    }
    let kc = k - &g * g.transpose() / s;
    let wt_kstar = w.transpose() * k_star;
    let kstar_c = k_star - &g * &wt_kstar / s;
    let gstar = k_star.transpose() * &w;
    let kss_c = k_starstar - &gstar * gstar.transpose() / s;
    Ok((kc, kstar_c, kss_c))
}

/// Base matrix and its length-scale derivative for one mode, after optional
/// centering. When centered, the auxiliaries of the raw matrix are kept so
/// cross columns can be centered consistently.
#[derive(Debug, Clone)]
pub struct BaseKernelMatrix {
    pub mode: usize,
    k: DMatrix<f64>,
    dk_dl: DMatrix<f64>,
    centering: Option<CenteringAux>,
}

#[derive(Debug, Clone)]
struct CenteringAux {
    w: DVector<f64>,
    /// `K_raw w`
    g: DVector<f64>,
    /// `w^T K_raw w`
    s: f64,
}

impl BaseKernelMatrix {
    pub fn size(&self) -> usize {
        self.k.nrows()
    }

    pub fn k(&self, i: usize, j: usize) -> f64 {
        self.k[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn deriv(&self) -> &DMatrix<f64> {
        &self.dk_dl
    }
}

/// The assembled additive kernel: order variances, length scales, per-mode
/// base matrices and the factor data consumed by the fast MVPs. Immutable
/// after assembly; hyperparameter changes produce a new value.
#[derive(Clone)]
pub struct AdditiveKernel {
    grid: Arc<IncompleteGrid>,
    kernel_mcr: ModeCombinationRange,
    sigma2: Vec<f64>,
    ell: Vec<f64>,
    centered: bool,
    base_kernel: Arc<dyn BaseKernel>,
    base: Vec<BaseKernelMatrix>,
    m_blocks: Vec<OneModeBlocks>,
    dm_blocks: Vec<OneModeBlocks>,
    /// Flat per-term tables: for kernel term `t`, the grid combination ids of
    /// all subsets of its mode set, in bitmask order over ascending modes.
    term_subset_ids: Vec<u32>,
    term_offsets: Vec<usize>,
    max_mini_len: usize,
}

impl std::fmt::Debug for AdditiveKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdditiveKernel")
            .field("dims", &self.grid.dims())
            .field("terms", &self.kernel_mcr.len())
            .field("sigma2", &self.sigma2)
            .field("centered", &self.centered)
            .finish()
    }
}

impl AdditiveKernel {
    /// Assembles with the squared-exponential base kernel.
    pub fn assemble(
        grid: Arc<IncompleteGrid>,
        kernel_mcr: ModeCombinationRange,
        sigma2: Vec<f64>,
        ell: Vec<f64>,
        centered: bool,
    ) -> Result<Self, KernelError> {
        AdditiveKernel::assemble_with(
            Arc::new(SquaredExponential),
            grid,
            kernel_mcr,
            sigma2,
            ell,
            centered,
        )
    }

    pub fn assemble_with(
        base_kernel: Arc<dyn BaseKernel>,
        grid: Arc<IncompleteGrid>,
        kernel_mcr: ModeCombinationRange,
        sigma2: Vec<f64>,
        ell: Vec<f64>,
        centered: bool,
    ) -> Result<Self, KernelError> {
        if !kernel_mcr.is_subrange_of(grid.mcr()) {
            return Err(KernelError::UnsupportedConfiguration(
                "kernel mode combinations must be a subset of the grid's".into(),
            ));
        }
        let omega = kernel_mcr.max_order();
        if sigma2.len() != omega + 1 {
            return Err(KernelError::InvalidArgument(format!(
                "expected {} order variances (orders 0..={omega}), got {}",
                omega + 1,
                sigma2.len()
            )));
        }
        if sigma2.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(KernelError::InvalidArgument(
                "order variances must be finite and nonnegative".into(),
            ));
        }
        let dims = grid.dims();
        if ell.len() != dims {
            return Err(KernelError::InvalidArgument(format!(
                "expected {dims} length scales, got {}",
                ell.len()
            )));
        }
        if ell.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
            return Err(KernelError::InvalidArgument(
                "length scales must be finite and positive".into(),
            ));
        }

        let weights = if centered {
            Some(centering_weights(&grid))
        } else {
            None
        };
        let mut base = Vec::with_capacity(dims);
        let mut m_blocks = Vec::with_capacity(dims);
        let mut dm_blocks = Vec::with_capacity(dims);
        for mode in 0..dims {
            let grid_1d = grid.shape().grid_1d(mode);
            let (k_raw, dk_raw) = base_matrix_with(base_kernel.as_ref(), grid_1d, ell[mode])?;
            let (k, dk, aux) = match &weights {
                Some(ws) => {
                    let w = DVector::from_column_slice(&ws[mode]);
                    let g = &k_raw * &w;
                    let s = w.dot(&g);
                    if s <= CENTERING_TOL * grid.len() as f64 {
                        return Err(KernelError::DegenerateCentering { mode, value: s });
                    }
                    let kc = &k_raw - &g * g.transpose() / s;
                    // d/dl of K - (Kw)(Kw)^T / (w^T K w), by the quotient rule.
                    let dg = &dk_raw * &w;
                    let ds = w.dot(&dg);
                    let dkc = &dk_raw - (&dg * g.transpose() + &g * dg.transpose()) / s
                        + &g * g.transpose() * (ds / (s * s));
                    (kc, dkc, Some(CenteringAux { w, g, s }))
                }
                None => (k_raw, dk_raw, None),
            };
            let n = k.nrows();
            let m_full = folded_factor(&k);
            let dm_full = folded_factor(&dk);
            m_blocks.push(OneModeBlocks::from_matrix(mode, &m_full, n));
            dm_blocks.push(OneModeBlocks::from_matrix(mode, &dm_full, n));
            base.push(BaseKernelMatrix {
                mode,
                k,
                dk_dl: dk,
                centering: aux,
            });
        }

        // Subset tables per kernel term, bitmask order over ascending modes.
        let mut term_subset_ids = Vec::new();
        let mut term_offsets = Vec::with_capacity(kernel_mcr.len() + 1);
        let mut max_mini_len = 1usize;
        term_offsets.push(0);
        for mc in kernel_mcr.iter() {
            let k = mc.order();
            let modes: Vec<usize> = mc.modes().collect();
            for mask in 0..(1usize << k) {
                let picked: Vec<usize> = modes
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask >> i & 1 == 1)
                    .map(|(_, &m)| m)
                    .collect();
                let sub = crate::grid::ModeCombination::new(&picked, dims)
                    .expect("subset of a valid combination");
                let id = grid
                    .mcr()
                    .id_of(&sub)
                    .expect("kernel range is contained in the subset-closed grid range");
                term_subset_ids.push(id as u32);
            }
            term_offsets.push(term_subset_ids.len());
            let mini: usize = modes.iter().map(|&m| grid.shape().grid_1d(m).len()).product();
            max_mini_len = max_mini_len.max(mini);
        }

        Ok(AdditiveKernel {
            grid,
            kernel_mcr,
            sigma2,
            ell,
            centered,
            base_kernel,
            base,
            m_blocks,
            dm_blocks,
            term_subset_ids,
            term_offsets,
            max_mini_len,
        })
    }

    pub fn grid(&self) -> &Arc<IncompleteGrid> {
        &self.grid
    }

    pub fn kernel_mcr(&self) -> &ModeCombinationRange {
        &self.kernel_mcr
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn ell(&self) -> &[f64] {
        &self.ell
    }

    /// Maximum interaction order.
    pub fn omega(&self) -> usize {
        self.sigma2.len() - 1
    }

    pub fn centered(&self) -> bool {
        self.centered
    }

    pub fn base(&self, mode: usize) -> &BaseKernelMatrix {
        &self.base[mode]
    }

    pub fn m_blocks(&self, mode: usize) -> &OneModeBlocks {
        &self.m_blocks[mode]
    }

    pub fn dm_blocks(&self, mode: usize) -> &OneModeBlocks {
        &self.dm_blocks[mode]
    }

    pub fn term_count(&self) -> usize {
        self.kernel_mcr.len()
    }

    pub fn term_order(&self, term: usize) -> usize {
        self.kernel_mcr.mc(term).order()
    }

    pub fn term_modes(&self, term: usize) -> impl Iterator<Item = usize> + '_ {
        self.kernel_mcr.mc(term).modes()
    }

    /// Grid combination ids of all subsets of the term's modes, bitmask
    /// order.
    pub fn term_subsets(&self, term: usize) -> &[u32] {
        &self.term_subset_ids[self.term_offsets[term]..self.term_offsets[term + 1]]
    }

    pub fn max_mini_len(&self) -> usize {
        self.max_mini_len
    }

    /// Train-test base column for one mode at a test coordinate, centered
    /// consistently with the assembled kernel.
    pub fn cross_base_column(&self, mode: usize, x_star: f64) -> Vec<f64> {
        let grid_1d = self.grid.shape().grid_1d(mode);
        let raw: Vec<f64> = grid_1d
            .iter()
            .map(|&x| self.base_kernel.eval(x, x_star, self.ell[mode]))
            .collect();
        match &self.base[mode].centering {
            None => raw,
            Some(aux) => {
                let wt_raw: f64 = aux.w.iter().zip(&raw).map(|(w, r)| w * r).sum();
                raw.iter()
                    .zip(aux.g.iter())
                    .map(|(r, g)| r - g * wt_raw / aux.s)
                    .collect()
            }
        }
    }

    /// Test-test base value for one mode, centered consistently.
    pub fn cross_test_value(&self, mode: usize, x_star: f64) -> f64 {
        let kss = self.base_kernel.eval(x_star, x_star, self.ell[mode]);
        match &self.base[mode].centering {
            None => kss,
            Some(aux) => {
                let grid_1d = self.grid.shape().grid_1d(mode);
                let raw: Vec<f64> = grid_1d
                    .iter()
                    .map(|&x| self.base_kernel.eval(x, x_star, self.ell[mode]))
                    .collect();
                let wt_raw: f64 = aux.w.iter().zip(&raw).map(|(w, r)| w * r).sum();
                kss - wt_raw * wt_raw / aux.s
            }
        }
    }

    /// Reassembles at new hyperparameters on the same grid and range.
    pub fn with_hyperparameters(
        &self,
        sigma2: Vec<f64>,
        ell: Vec<f64>,
    ) -> Result<Self, KernelError> {
        AdditiveKernel::assemble_with(
            self.base_kernel.clone(),
            self.grid.clone(),
            self.kernel_mcr.clone(),
            sigma2,
            ell,
            self.centered,
        )
    }
}

/// `M = (I - D) K (I - S)`: subtract row 0 from displaced rows, then column
/// 0 from displaced columns. Returned row-major.
fn folded_factor(k: &DMatrix<f64>) -> Vec<f64> {
    let n = k.nrows();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut v = k[(i, j)];
            if i > 0 {
                v -= k[(0, j)];
            }
            if j > 0 {
                v -= k[(i, 0)];
                if i > 0 {
                    v += k[(0, 0)];
                }
            }
            m[i * n + j] = v;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::IncompleteGrid;
    use approx::assert_relative_eq;

    #[test]
    fn base_matrix_single_point() {
        let k = base_matrix(&[0.0], 3.7).unwrap();
        assert_eq!(k.nrows(), 1);
        assert_eq!(k[(0, 0)], 1.0);
    }

    #[test]
    fn base_matrix_analytic_offdiagonal() {
        let ell = 0.8;
        let k = base_matrix(&[0.0, ell * std::f64::consts::SQRT_2], ell).unwrap();
        assert_relative_eq!(k[(0, 1)], (-1.0f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(k[(1, 0)], (-1.0f64).exp(), max_relative = 1e-14);
        assert_eq!(k[(0, 0)], 1.0);
    }

    #[test]
    fn base_matrix_rejects_nonpositive_ell() {
        assert!(base_matrix(&[0.0, 1.0], 0.0).is_err());
        assert!(base_matrix(&[0.0, 1.0], -1.0).is_err());
    }

    #[test]
    fn base_derivative_matches_finite_differences() {
        let x = [0.0, 0.3, 1.1, 2.4];
        let ell = 0.9;
        let (_, dk) = base_matrix_with(&SquaredExponential, &x, ell).unwrap();
        let h = 1e-6 * ell;
        let kp = base_matrix(&x, ell + h).unwrap();
        let km = base_matrix(&x, ell - h).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let fd = (kp[(i, j)] - km[(i, j)]) / (2.0 * h);
                if fd.abs() > 1e-12 {
                    assert_relative_eq!(dk[(i, j)], fd, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn centering_weights_example() {
        let grid = IncompleteGrid::simple(3, 2, vec![0.0, 1.0, 2.0]).unwrap();
        let w = centering_weights(&grid);
        assert_eq!(w[0], vec![9.0, 5.0, 5.0]);
        for wm in &w {
            assert_eq!(wm.iter().sum::<f64>(), 19.0);
        }
    }

    #[test]
    fn centered_matrix_annihilates_weights() {
        let x = [0.0, 0.7, 1.9, 3.0];
        let k = base_matrix(&x, 1.2).unwrap();
        let w = vec![5.0, 2.0, 2.0, 2.0];
        let (kc, _, _) = center(&k, &k, &k, &w).unwrap();
        let wv = DVector::from_column_slice(&w);
        let residual = &kc * &wv;
        let scale = k.amax() * w.iter().map(|x| x.abs()).sum::<f64>();
        for r in residual.iter() {
            assert!(r.abs() <= 1e-13 * scale);
        }
    }

    #[test]
    fn centering_single_point_is_zero() {
        let k = DMatrix::from_element(1, 1, 1.0);
        let (kc, _, _) = center(&k, &k, &k, &[1.0]).unwrap();
        assert_eq!(kc[(0, 0)], 0.0);
    }

    #[test]
    fn center_matches_direct_formula() {
        // Random-ish SPD K and positive w, checked against the rank-one
        // update evaluated independently.
        let a = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.2, 0.1, 0.4,
            0.0, 1.1, 0.3, 0.2,
            0.0, 0.0, 0.9, 0.1,
            0.0, 0.0, 0.0, 1.3,
        ]);
        let k = &a * a.transpose();
        let w = vec![3.0, 1.0, 2.0, 1.5];
        let (kc, _, _) = center(&k, &k, &k, &w).unwrap();
        let wv = DVector::from_column_slice(&w);
        let g = &k * &wv;
        let s = wv.dot(&g);
        for i in 0..4 {
            for j in 0..4 {
                let expect = k[(i, j)] - g[i] * g[j] / s;
                assert_relative_eq!(kc[(i, j)], expect, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn folded_factor_hand_example() {
        // n = 2, K = [[1, b], [b, 1]] gives M = [[1, b-1], [b-1, 2-2b]].
        let b = 0.37;
        let k = DMatrix::from_row_slice(2, 2, &[1.0, b, b, 1.0]);
        let m = folded_factor(&k);
        assert_relative_eq!(m[0], 1.0);
        assert_relative_eq!(m[1], b - 1.0, max_relative = 1e-15);
        assert_relative_eq!(m[2], b - 1.0, max_relative = 1e-15);
        assert_relative_eq!(m[3], 2.0 - 2.0 * b, max_relative = 1e-15);
    }

    #[test]
    fn all_ones_folds_to_reference_projector() {
        for n in 1..=8 {
            let j = DMatrix::from_element(n, n, 1.0);
            let m = folded_factor(&j);
            for i in 0..n {
                for l in 0..n {
                    let expect = if i == 0 && l == 0 { 1.0 } else { 0.0 };
                    assert_eq!(m[i * n + l], expect);
                }
            }
        }
    }

    #[test]
    fn lmu_reconstructs_base_matrix() {
        for n in 2..=6 {
            let x: Vec<f64> = (0..n).map(|i| (i as f64) * 0.37 + 0.1 * (i as f64).sin()).collect();
            let k = base_matrix(&x, 0.8).unwrap();
            let m = folded_factor(&k);
            // L and U with closed forms: L = I + D, U = I + S.
            let mut l = DMatrix::identity(n, n);
            let mut u = DMatrix::identity(n, n);
            for i in 1..n {
                l[(i, 0)] = 1.0;
                u[(0, i)] = 1.0;
            }
            let mm = DMatrix::from_row_slice(n, n, &m);
            let back = &l * mm * &u;
            for i in 0..n {
                for j in 0..n {
                    assert_relative_eq!(back[(i, j)], k[(i, j)], max_relative = 1e-13);
                }
            }
        }
    }

    #[test]
    fn assemble_validates_configuration() {
        let grid = IncompleteGrid::simple(3, 1, vec![0.0, 1.0]).unwrap();
        let wide = ModeCombinationRange::simple(3, 2).unwrap();
        let err = AdditiveKernel::assemble(grid.clone(), wide, vec![1.0; 3], vec![1.0; 3], false);
        assert!(matches!(err, Err(KernelError::UnsupportedConfiguration(_))));

        let narrow = ModeCombinationRange::simple(3, 1).unwrap();
        assert!(AdditiveKernel::assemble(
            grid.clone(),
            narrow.clone(),
            vec![1.0, 0.5],
            vec![1.0; 3],
            true
        )
        .is_ok());
        assert!(AdditiveKernel::assemble(
            grid.clone(),
            narrow.clone(),
            vec![1.0],
            vec![1.0; 3],
            false
        )
        .is_err());
        assert!(AdditiveKernel::assemble(
            grid,
            narrow,
            vec![1.0, 0.5],
            vec![1.0, -1.0, 1.0],
            false
        )
        .is_err());
    }

    #[test]
    fn centered_derivative_matches_finite_differences() {
        let grid = IncompleteGrid::simple(3, 2, vec![0.0, 0.8, 1.7, 2.2]).unwrap();
        let mcr = ModeCombinationRange::simple(3, 2).unwrap();
        let sigma2 = vec![0.3, 0.8, 0.5];
        let ell = vec![0.9, 1.4, 0.7];
        let kernel =
            AdditiveKernel::assemble(grid.clone(), mcr.clone(), sigma2.clone(), ell.clone(), true)
                .unwrap();
        let mode = 1;
        let h = 1e-5 * ell[mode];
        let mut ell_p = ell.clone();
        ell_p[mode] += h;
        let mut ell_m = ell.clone();
        ell_m[mode] -= h;
        let kp =
            AdditiveKernel::assemble(grid.clone(), mcr.clone(), sigma2.clone(), ell_p, true)
                .unwrap();
        let km = AdditiveKernel::assemble(grid, mcr, sigma2, ell_m, true).unwrap();
        let n = kernel.base(mode).size();
        for i in 0..n {
            for j in 0..n {
                let fd = (kp.base(mode).k(i, j) - km.base(mode).k(i, j)) / (2.0 * h);
                let an = kernel.base(mode).deriv()[(i, j)];
                if fd.abs() > 1e-10 {
                    assert_relative_eq!(an, fd, max_relative = 1e-6);
                }
                // The folded derivative must agree too.
                let dm = kernel.dm_blocks(mode).entry(i, j);
                let fd_m = {
                    let mp = kp.m_blocks(mode).entry(i, j);
                    let mm = km.m_blocks(mode).entry(i, j);
                    (mp - mm) / (2.0 * h)
                };
                if fd_m.abs() > 1e-10 {
                    assert_relative_eq!(dm, fd_m, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn centered_deriv_annihilates_weights_too() {
        let grid = IncompleteGrid::simple(2, 2, vec![0.0, 1.0, 2.5]).unwrap();
        let mcr = ModeCombinationRange::simple(2, 2).unwrap();
        let kernel =
            AdditiveKernel::assemble(grid.clone(), mcr, vec![0.1, 1.0, 0.4], vec![1.1, 0.8], true)
                .unwrap();
        let w = centering_weights(&grid);
        for (mode, wm) in w.iter().enumerate() {
            let dk = kernel.base(mode).deriv();
            let wv = DVector::from_column_slice(wm);
            let r = dk * &wv;
            for x in r.iter() {
                assert!(x.abs() < 1e-11, "residual {x}");
            }
        }
    }
}
