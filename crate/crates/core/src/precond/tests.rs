use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::grid::{GridShape, IncompleteGrid, ModeCombinationRange};
use crate::kernel::AdditiveKernel;

fn tensor_from(grid: &Arc<IncompleteGrid>, data: &[f64]) -> McrTensor {
    McrTensor::from_vec(grid.clone(), data.to_vec()).unwrap()
}

fn two_point_grid() -> Arc<IncompleteGrid> {
    IncompleteGrid::simple(1, 1, vec![0.0, 1.0]).unwrap()
}

fn random_kernel(
    dims: usize,
    alpha: usize,
    n: usize,
    centered: bool,
    seed: u64,
) -> (Arc<IncompleteGrid>, AdditiveKernel) {
    let mut rng = StdRng::seed_from_u64(seed);
    let grids: Vec<Vec<f64>> = (0..dims)
        .map(|_| (0..n).map(|i| i as f64 + rng.gen_range(-0.2..0.2)).collect())
        .collect();
    let shape = GridShape::new(grids).unwrap();
    let mcr = ModeCombinationRange::simple(dims, alpha).unwrap();
    let grid = IncompleteGrid::new(shape, mcr.clone()).unwrap();
    let sigma2: Vec<f64> = (0..=alpha).map(|_| rng.gen_range(0.2..1.0)).collect();
    let ell: Vec<f64> = (0..dims).map(|_| rng.gen_range(0.9..2.2)).collect();
    let kernel = AdditiveKernel::assemble(grid.clone(), mcr, sigma2, ell, centered).unwrap();
    (grid, kernel)
}

#[test]
fn hand_computed_two_by_two() {
    // K = [[2, 1], [1, 2]]: pivots (0, 1), Z = [[sqrt 2, 0],
    // [1/sqrt 2, sqrt 1.5]], and Z Z^T reconstructs K exactly.
    let grid = two_point_grid();
    let k = [[2.0, 1.0], [1.0, 2.0]];
    let diag = tensor_from(&grid, &[2.0, 2.0]);
    let p = Preconditioner::build(
        &diag,
        |i| tensor_from(&grid, &[k[0][i as usize], k[1][i as usize]]),
        2,
        0.1,
    )
    .unwrap();
    assert_eq!(p.pivots(), &[0, 1]);
    let z0 = p.z_column(0);
    let z1 = p.z_column(1);
    assert!((z0[0] - 2.0f64.sqrt()).abs() < 1e-15);
    assert!((z0[1] - 1.0 / 2.0f64.sqrt()).abs() < 1e-15);
    assert!(z1[0].abs() < 1e-15);
    assert!((z1[1] - 1.5f64.sqrt()).abs() < 1e-15);
    for i in 0..2 {
        for j in 0..2 {
            let zz = z0[i] * z0[j] + z1[i] * z1[j];
            assert!((zz - k[i][j]).abs() < 1e-14);
        }
    }
}

#[test]
fn rank_zero_is_scaled_identity() {
    let grid = two_point_grid();
    let diag = McrTensor::zeros(grid.clone());
    let noise = 0.25;
    let p = Preconditioner::build(&diag, |_| unreachable!(), 0, noise).unwrap();
    assert_eq!(p.rank(), 0);
    let v = tensor_from(&grid, &[3.0, -1.0]);
    let s = p.solve(&v);
    assert_eq!(s.as_slice(), &[12.0, -4.0]);
    assert!((p.logdet() - 2.0 * noise.ln()).abs() < 1e-14);
    assert!((p.trace_inverse() - 2.0 / noise).abs() < 1e-14);
    assert!(p.solve(&McrTensor::zeros(grid)).as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn build_rejects_bad_input() {
    let grid = two_point_grid();
    let diag = tensor_from(&grid, &[1.0, -1.0]);
    assert!(Preconditioner::build(&diag, |_| unreachable!(), 0, 1.0).is_err());
    let ok = tensor_from(&grid, &[1.0, 1.0]);
    assert!(Preconditioner::build(&ok, |_| unreachable!(), 0, 0.0).is_err());
}

#[cfg(feature = "oracle")]
#[test]
fn full_rank_reconstructs_kernel() {
    use crate::oracle;
    let (grid, kernel) = random_kernel(3, 2, 3, true, 5);
    let n = grid.len();
    let p = Preconditioner::from_kernel(&kernel, n, 1e-3).unwrap();
    let dense = oracle::dense_pairwise(&kernel, 5000).unwrap();
    let scale = dense.amax();
    for i in 0..n {
        for j in 0..n {
            let mut zz = 0.0;
            for t in 0..p.rank() {
                let z = p.z_column(t);
                zz += z[i] * z[j];
            }
            assert!(
                (zz - dense[(i, j)]).abs() <= 1e-10 * scale,
                "entry ({i},{j})"
            );
        }
    }
    // Residual diagonal of the exhausted factorization stays nonnegative
    // within tolerance.
    for i in 0..n {
        let mut zz = 0.0;
        for t in 0..p.rank() {
            let z = p.z_column(t);
            zz += z[i] * z[i];
        }
        assert!(dense[(i, i)] - zz >= -1e-10 * scale);
    }
}

#[test]
fn early_stop_on_numerically_low_rank() {
    // A constant kernel has rank one: requesting more must stop early.
    let grid = IncompleteGrid::simple(3, 2, vec![0.0, 1.0, 2.0]).unwrap();
    let mcr0 = ModeCombinationRange::simple(3, 0).unwrap();
    let kernel =
        AdditiveKernel::assemble(grid.clone(), mcr0, vec![0.8], vec![1.0; 3], false).unwrap();
    let p = Preconditioner::from_kernel(&kernel, 5, 1e-2).unwrap();
    assert_eq!(p.requested_rank(), 5);
    assert_eq!(p.rank(), 1);
}

#[test]
fn solve_multiplies_back() {
    let (grid, kernel) = random_kernel(3, 2, 4, false, 11);
    let p = Preconditioner::from_kernel(&kernel, 6, 0.05).unwrap();
    let mut rng = StdRng::seed_from_u64(2);
    for _ in 0..5 {
        let v = tensor_from(
            &grid,
            &(0..grid.len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        );
        let s = p.solve(&v);
        let back = p.apply(&s);
        let scale = v.norm();
        for i in 0..grid.len() {
            assert!((back.as_slice()[i] - v.as_slice()[i]).abs() <= 1e-10 * scale);
        }
    }
}

#[cfg(feature = "oracle")]
#[test]
fn logdet_matches_dense_eigenvalues() {
    use nalgebra::DMatrix;
    let (grid, kernel) = random_kernel(3, 2, 3, true, 17);
    let noise = 0.07;
    let p = Preconditioner::from_kernel(&kernel, 5, noise).unwrap();
    let n = grid.len();
    let mut zz = DMatrix::zeros(n, n);
    for t in 0..p.rank() {
        let z = nalgebra::DVector::from_vec(p.z_column(t));
        zz += &z * z.transpose();
    }
    let pm = zz + DMatrix::identity(n, n) * noise;
    let eig = pm.symmetric_eigen();
    let want: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    assert!((p.logdet() - want).abs() < 1e-8);
}

#[cfg(feature = "oracle")]
#[test]
fn nystrom_identity_holds() {
    use crate::oracle;
    use nalgebra::DMatrix;
    for seed in [3u64, 9, 21] {
        let (grid, kernel) = random_kernel(4, 2, 3, seed % 2 == 0, seed);
        let p = Preconditioner::from_kernel(&kernel, 12.min(grid.len()), 1e-3).unwrap();
        let dense = oracle::dense_pairwise(&kernel, 5000).unwrap();
        let k = p.rank();
        let n = grid.len();
        let a = DMatrix::from_fn(n, k, |i, j| dense[(i, p.pivots()[j] as usize)]);
        let b = DMatrix::from_fn(k, k, |i, j| {
            dense[(p.pivots()[i] as usize, p.pivots()[j] as usize)]
        });
        let binv = b.try_inverse().unwrap();
        let nystrom = &a * binv * a.transpose();
        let mut zz = DMatrix::zeros(n, n);
        for t in 0..k {
            let z = nalgebra::DVector::from_vec(p.z_column(t));
            zz += &z * z.transpose();
        }
        let scale = dense.amax();
        for i in 0..n {
            for j in 0..n {
                assert!(
                    (zz[(i, j)] - nystrom[(i, j)]).abs() <= 1e-8 * scale,
                    "seed {seed} entry ({i},{j})"
                );
            }
        }
    }
}

#[test]
fn probe_sampling_rank_zero_is_rademacher() {
    let grid = two_point_grid();
    let diag = McrTensor::zeros(grid.clone());
    let p = Preconditioner::build(&diag, |_| unreachable!(), 0, 1.0).unwrap();
    let mut rng = crate::krylov::probe_rng(7, 0);
    for _ in 0..50 {
        let b = p.sample_probe(&mut rng);
        assert!(b.as_slice().iter().all(|&x| x == 1.0 || x == -1.0));
    }
}

#[test]
fn probe_mean_is_centered() {
    let (grid, kernel) = random_kernel(3, 1, 3, false, 23);
    let p = Preconditioner::from_kernel(&kernel, 4, 0.5).unwrap();
    let samples = 20_000;
    let mut mean = vec![0.0; grid.len()];
    let mut m2 = vec![0.0; grid.len()];
    for i in 0..samples {
        let mut rng = crate::krylov::probe_rng(13, i as u64);
        let b = p.sample_probe(&mut rng);
        for (j, &x) in b.as_slice().iter().enumerate() {
            mean[j] += x;
            m2[j] += x * x;
        }
    }
    for j in 0..grid.len() {
        let m = mean[j] / samples as f64;
        let var = m2[j] / samples as f64 - m * m;
        let se = (var / samples as f64).sqrt();
        assert!(m.abs() <= 5.0 * se.max(1e-12), "component {j}: {m} vs se {se}");
    }
}

#[cfg(feature = "oracle")]
#[test]
fn trace_terms_rank_zero_is_noise_only() {
    let grid = IncompleteGrid::simple(2, 1, vec![0.0, 1.0, 2.0]).unwrap();
    let mcr = ModeCombinationRange::simple(2, 1).unwrap();
    let kernel = AdditiveKernel::assemble(
        grid.clone(),
        mcr,
        vec![0.0, 0.0],
        vec![1.0, 1.0],
        false,
    )
    .unwrap();
    let noise = 0.3;
    let p = Preconditioner::from_kernel(&kernel, 4, noise).unwrap();
    assert_eq!(p.rank(), 0);
    let t = p.trace_terms(&kernel);
    assert!((t.noise - grid.len() as f64 / noise).abs() < 1e-12);
    assert!(t.order_variances.iter().all(|&x| x == 0.0));
    assert!(t.length_scales.iter().all(|&x| x == 0.0));
}

#[cfg(feature = "oracle")]
#[test]
fn trace_terms_match_dense_frozen_pivot_differences() {
    use crate::oracle;
    use nalgebra::DMatrix;

    let dims = 3;
    let alpha = 2;
    let n = 3;
    let (grid, kernel) = random_kernel(dims, alpha, n, true, 31);
    let noise = 0.05;
    let rank = 6;
    let p = Preconditioner::from_kernel(&kernel, rank, noise).unwrap();
    let got = p.trace_terms(&kernel);
    let pivots: Vec<usize> = p.pivots().iter().map(|&i| i as usize).collect();
    let npts = grid.len();

    // Dense Nystrom preconditioner at the frozen pivot set for perturbed
    // hyperparameters.
    let dense_p = |sigma2: &[f64], ell: &[f64]| -> DMatrix<f64> {
        let kern = kernel
            .with_hyperparameters(sigma2.to_vec(), ell.to_vec())
            .unwrap();
        let dense = oracle::dense_pairwise(&kern, 5000).unwrap();
        let k = pivots.len();
        let a = DMatrix::from_fn(npts, k, |i, j| dense[(i, pivots[j])]);
        let b = DMatrix::from_fn(k, k, |i, j| dense[(pivots[i], pivots[j])]);
        let binv = b.try_inverse().unwrap();
        &a * binv * a.transpose() + DMatrix::identity(npts, npts) * noise
    };

    let sigma2 = kernel.sigma2().to_vec();
    let ell = kernel.ell().to_vec();
    let p0 = dense_p(&sigma2, &ell);
    let p0_inv = p0.clone().try_inverse().unwrap();

    let check = |dp: DMatrix<f64>, want_slot: f64, label: String| {
        let tr = (&p0_inv * dp).trace();
        let tol = 1e-5 * tr.abs().max(1e-6);
        assert!(
            (want_slot - tr).abs() <= tol,
            "{label}: analytic {want_slot} vs dense {tr}"
        );
    };

    for k in 0..=alpha {
        let h = 1e-6 * sigma2[k].max(0.1);
        let mut sp = sigma2.clone();
        sp[k] += h;
        let mut sm = sigma2.clone();
        sm[k] -= h;
        let dp = (dense_p(&sp, &ell) - dense_p(&sm, &ell)) / (2.0 * h);
        check(dp, got.order_variances[k], format!("order variance {k}"));
    }
    for m in 0..dims {
        let h = 1e-6 * ell[m];
        let mut lp = ell.clone();
        lp[m] += h;
        let mut lm = ell.clone();
        lm[m] -= h;
        let dp = (dense_p(&sigma2, &lp) - dense_p(&sigma2, &lm)) / (2.0 * h);
        check(dp, got.length_scales[m], format!("length scale {m}"));
    }
    // Noise entry equals tr(P^-1) exactly.
    assert!((got.noise - p0_inv.trace()).abs() <= 1e-8 * p0_inv.trace());
}
