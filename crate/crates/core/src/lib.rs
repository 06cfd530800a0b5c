//! Exact Gaussian process regression for additive kernels whose training
//! inputs lie on cut-based incomplete grids.
//!
//! The engine is built around a factorized kernel matrix-vector product with
//! `O(n alpha N)` cost over the incomplete grid, iterative (CG/Lanczos)
//! inference with a pivoted-Cholesky preconditioner, and stochastic trace
//! estimation for the marginal-likelihood gradient.
//!
//! Module map:
//! - [`grid`]: mode combinations, incomplete-grid index sets, canonical
//!   ordering and the subtensor container for vectors over the grid.
//! - [`kernel`]: 1D base kernels, empirical centering and additive-kernel
//!   assembly into the per-mode factor data the fast MVP consumes.
//! - [`fastmvp`]: all structured matrix-vector products (the chopped one-mode
//!   contraction, the L/M/U/K/C products, derivative products, batched
//!   quadratic terms, single columns and the kernel diagonal).
//! - [`precond`]: rank-k pivoted-Cholesky preconditioner with Woodbury
//!   solves, probe sampling and deterministic trace terms.
//! - [`krylov`]: preconditioned CG with Lanczos-tridiagonal extraction and
//!   stochastic estimators for the log-determinant and trace terms.
//! - [`gpr`]: standardization, marginal-likelihood optimization with Adam and
//!   priors, prediction, and the serializable model format.
//! - [`oracle`] (feature `oracle`): dense brute-force reference
//!   implementations used by tests and validation.

pub mod fastmvp;
pub mod files;
pub mod gpr;
pub mod grid;
pub mod kernel;
pub mod krylov;
pub mod precond;

#[cfg(feature = "oracle")]
pub mod oracle;

pub use grid::{GridShape, IncompleteGrid, McrTensor, ModeCombination, ModeCombinationRange};
pub use kernel::AdditiveKernel;
