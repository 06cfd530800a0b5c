use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::grid::{IncompleteGrid, ModeCombinationRange};
use crate::kernel::HyperParam;

fn random_tensor(grid: &Arc<IncompleteGrid>, rng: &mut StdRng) -> McrTensor {
    let data: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    McrTensor::from_vec(grid.clone(), data).unwrap()
}

fn random_grid_1d(n: usize, rng: &mut StdRng) -> Vec<f64> {
    (0..n).map(|i| i as f64 + rng.gen_range(-0.3..0.3)).collect()
}

fn random_kernel(
    dims: usize,
    alpha: usize,
    n: usize,
    centered: bool,
    rng: &mut StdRng,
) -> (Arc<IncompleteGrid>, AdditiveKernel) {
    let grids: Vec<Vec<f64>> = (0..dims).map(|_| random_grid_1d(n, rng)).collect();
    let shape = crate::grid::GridShape::new(grids).unwrap();
    let mcr = ModeCombinationRange::simple(dims, alpha).unwrap();
    let grid = IncompleteGrid::new(shape, mcr.clone()).unwrap();
    let sigma2: Vec<f64> = (0..=alpha).map(|_| rng.gen_range(0.1..1.0)).collect();
    let ell: Vec<f64> = (0..dims).map(|_| rng.gen_range(0.8..2.5)).collect();
    let kernel = AdditiveKernel::assemble(grid.clone(), mcr, sigma2, ell, centered).unwrap();
    (grid, kernel)
}

fn max_rel_err(got: &McrTensor, want: &McrTensor) -> f64 {
    let scale = want
        .as_slice()
        .iter()
        .map(|x| x.abs())
        .fold(f64::MIN_POSITIVE, f64::max);
    got.as_slice()
        .iter()
        .zip(want.as_slice())
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max)
        / scale
}

#[test]
fn identity_blocks_add_input() {
    let grid = IncompleteGrid::simple(3, 2, vec![0.0, 1.0, 2.0]).unwrap();
    let mut rng = StdRng::seed_from_u64(7);
    let v = random_tensor(&grid, &mut rng);
    let mut w = McrTensor::zeros(grid.clone());
    let blocks = OneModeBlocks::identity(1, 3);
    one_mode_contract(&blocks, &v, &mut w).unwrap();
    let err = max_rel_err(&w, &v);
    assert!(err < 1e-15, "identity contraction should copy, err {err}");
}

#[test]
fn one_mode_contract_matches_dense_1d() {
    // A full 1D grid is a complete grid: the contraction is a plain MVP.
    let grid = IncompleteGrid::simple(1, 1, vec![0.0, 1.0, 2.0]).unwrap();
    let mut rng = StdRng::seed_from_u64(3);
    let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let blocks = OneModeBlocks::from_matrix(0, &a, 3);
    let v = random_tensor(&grid, &mut rng);
    let mut w = McrTensor::zeros(grid.clone());
    one_mode_contract(&blocks, &v, &mut w).unwrap();
    for i in 0..3 {
        let want: f64 = (0..3).map(|j| a[i * 3 + j] * v.as_slice()[j]).sum();
        assert!((w.as_slice()[i] - want).abs() < 1e-14);
    }
}

#[test]
fn one_mode_contract_rejects_grid_mismatch() {
    let g1 = IncompleteGrid::simple(2, 1, vec![0.0, 1.0]).unwrap();
    let g2 = IncompleteGrid::simple(2, 1, vec![0.0, 1.0]).unwrap();
    let v = McrTensor::zeros(g1);
    let mut w = McrTensor::zeros(g2);
    let blocks = OneModeBlocks::identity(0, 2);
    assert!(one_mode_contract(&blocks, &v, &mut w).is_err());
}

#[cfg(feature = "oracle")]
#[test]
fn one_mode_contract_matches_chopped_dense() {
    use crate::oracle::{chop_matrix, complete_positions};
    use nalgebra::DMatrix;
    let mut rng = StdRng::seed_from_u64(11);
    let grid = IncompleteGrid::simple(3, 2, vec![0.0, 1.0, 2.0]).unwrap();
    let n = 3usize;
    for mode in 0..3 {
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let blocks = OneModeBlocks::from_matrix(mode, &a, n);
        let v = random_tensor(&grid, &mut rng);
        let mut w = McrTensor::zeros(grid.clone());
        one_mode_contract(&blocks, &v, &mut w).unwrap();

        // Dense route: complete-grid bracket matrix, explicitly chopped.
        let amat = DMatrix::from_row_slice(n, n, &a);
        let eye = DMatrix::identity(n, n);
        let mut full = DMatrix::from_element(1, 1, 1.0);
        for d in 0..3 {
            full = full.kronecker(if d == mode { &amat } else { &eye });
        }
        let positions = complete_positions(&grid);
        let chopped = chop_matrix(&full, &positions);
        let vd = nalgebra::DVector::from_column_slice(v.as_slice());
        let want = chopped * vd;
        let want = McrTensor::from_vec(grid.clone(), want.data.into()).unwrap();
        let err = max_rel_err(&w, &want);
        assert!(err < 1e-13, "mode {mode} chopped contraction err {err}");
    }
}

#[test]
fn mvp_l_and_u_1d_examples() {
    let grid = IncompleteGrid::simple(1, 1, vec![0.0, 1.0, 2.0]).unwrap();
    let v = McrTensor::from_vec(grid.clone(), vec![1.0, 2.0, 3.0]).unwrap();
    assert_eq!(mvp_l(&v).as_slice(), &[1.0, 3.0, 4.0]);
    assert_eq!(mvp_u(&v).as_slice(), &[6.0, 2.0, 3.0]);
}

#[cfg(feature = "oracle")]
#[test]
fn mvp_l_and_u_match_dense_chopped() {
    use crate::oracle::{chop_matrix, complete_positions};
    use nalgebra::DMatrix;
    let mut rng = StdRng::seed_from_u64(23);
    let n = 4usize;
    let grid = IncompleteGrid::simple(4, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let mut lmat = DMatrix::identity(n, n);
    let mut umat = DMatrix::identity(n, n);
    for i in 1..n {
        lmat[(i, 0)] = 1.0;
        umat[(0, i)] = 1.0;
    }
    let mut full_l = DMatrix::from_element(1, 1, 1.0);
    let mut full_u = DMatrix::from_element(1, 1, 1.0);
    for _ in 0..4 {
        full_l = full_l.kronecker(&lmat);
        full_u = full_u.kronecker(&umat);
    }
    let positions = complete_positions(&grid);
    let chopped_l = chop_matrix(&full_l, &positions);
    let chopped_u = chop_matrix(&full_u, &positions);
    for _ in 0..5 {
        let v = random_tensor(&grid, &mut rng);
        let vd = nalgebra::DVector::from_column_slice(v.as_slice());
        let want_l =
            McrTensor::from_vec(grid.clone(), (&chopped_l * &vd).data.into()).unwrap();
        let want_u =
            McrTensor::from_vec(grid.clone(), (&chopped_u * &vd).data.into()).unwrap();
        assert!(max_rel_err(&mvp_l(&v), &want_l) < 1e-13);
        assert!(max_rel_err(&mvp_u(&v), &want_u) < 1e-13);
    }
}

#[test]
fn mvp_m_constant_kernel_touches_reference_only() {
    let mut rng = StdRng::seed_from_u64(5);
    let grid = IncompleteGrid::simple(3, 2, vec![0.0, 1.0, 2.0]).unwrap();
    let kernel_mcr = ModeCombinationRange::simple(3, 0).unwrap();
    let sigma0 = 0.7;
    let kernel = AdditiveKernel::assemble(
        grid.clone(),
        kernel_mcr,
        vec![sigma0],
        vec![1.0; 3],
        false,
    )
    .unwrap();
    let v = random_tensor(&grid, &mut rng);
    let out = mvp_m(&kernel, &v);
    assert!((out.reference() - sigma0 * v.reference()).abs() < 1e-15);
    assert!(out.as_slice()[1..].iter().all(|&x| x == 0.0));
}

#[test]
fn mvp_m_zero_variances_give_zero() {
    let mut rng = StdRng::seed_from_u64(6);
    let grid = IncompleteGrid::simple(3, 2, vec![0.0, 1.0, 2.0]).unwrap();
    let mcr = ModeCombinationRange::simple(3, 2).unwrap();
    let kernel =
        AdditiveKernel::assemble(grid.clone(), mcr, vec![0.0; 3], vec![1.0; 3], false).unwrap();
    let v = random_tensor(&grid, &mut rng);
    let out = mvp_k(&kernel, &v);
    assert!(out.as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn mvp_k_constant_kernel_is_scaled_ones() {
    let mut rng = StdRng::seed_from_u64(9);
    let grid = IncompleteGrid::simple(3, 2, vec![0.0, 1.0, 2.0]).unwrap();
    let kernel_mcr = ModeCombinationRange::simple(3, 0).unwrap();
    let sigma0 = 1.3;
    let kernel = AdditiveKernel::assemble(
        grid.clone(),
        kernel_mcr,
        vec![sigma0],
        vec![1.0; 3],
        false,
    )
    .unwrap();
    let v = random_tensor(&grid, &mut rng);
    let total: f64 = v.as_slice().iter().sum();
    let out = mvp_k(&kernel, &v);
    for &x in out.as_slice() {
        assert!((x - sigma0 * total).abs() < 1e-12 * total.abs().max(1.0));
    }
}

#[test]
fn mvp_k_zero_vector_is_zero() {
    let mut rng = StdRng::seed_from_u64(10);
    let (grid, kernel) = random_kernel(3, 2, 3, false, &mut rng);
    let v = McrTensor::zeros(grid);
    assert!(mvp_k(&kernel, &v).as_slice().iter().all(|&x| x == 0.0));
}

#[cfg(feature = "oracle")]
#[test]
fn mvp_m_matches_dense_oracle() {
    use crate::oracle::{chop_matrix, complete_positions};
    use nalgebra::DMatrix;
    let mut rng = StdRng::seed_from_u64(31);
    let (grid, kernel) = random_kernel(4, 3, 3, false, &mut rng);
    // Dense M over the complete grid: per-term Kronecker with M factors at
    // term modes and the reference projector R elsewhere.
    let n = 3usize;
    let total = 81usize;
    let mut full = DMatrix::zeros(total, total);
    for term in 0..kernel.term_count() {
        let sig = kernel.sigma2()[kernel.term_order(term)];
        let modes: Vec<usize> = kernel.term_modes(term).collect();
        let mut cur = DMatrix::from_element(1, 1, sig);
        for d in 0..4 {
            let f = if modes.contains(&d) {
                DMatrix::from_row_slice(n, n, kernel.m_blocks(d).full())
            } else {
                let mut r = DMatrix::zeros(n, n);
                r[(0, 0)] = 1.0;
                r
            };
            cur = cur.kronecker(&f);
        }
        full += cur;
    }
    let positions = complete_positions(&grid);
    let chopped = chop_matrix(&full, &positions);
    for _ in 0..5 {
        let v = random_tensor(&grid, &mut rng);
        let vd = nalgebra::DVector::from_column_slice(v.as_slice());
        let want = McrTensor::from_vec(grid.clone(), (&chopped * vd).data.into()).unwrap();
        let got = mvp_m(&kernel, &v);
        let err = max_rel_err(&got, &want);
        assert!(err < 1e-12, "mvp_m dense mismatch {err}");
    }
}

#[cfg(feature = "oracle")]
#[test]
fn mvp_k_matches_both_oracles_small() {
    use crate::oracle;
    for seed in 0..6u64 {
        let mut rng = StdRng::seed_from_u64(100 + seed);
        let centered = seed % 2 == 1;
        let (grid, kernel) = random_kernel(3, 2, 3, centered, &mut rng);
        let pairwise = oracle::dense_pairwise(&kernel, 5000).unwrap();
        let v = random_tensor(&grid, &mut rng);
        let got = mvp_k(&kernel, &v);
        let vd = nalgebra::DVector::from_column_slice(v.as_slice());
        let want =
            McrTensor::from_vec(grid.clone(), (&pairwise * vd).data.into()).unwrap();
        assert!(max_rel_err(&got, &want) < 1e-12);
        let chopped = oracle::complete_mvp_chopped(&kernel, &v, 1_000_000).unwrap();
        assert!(max_rel_err(&got, &chopped) < 1e-12);
    }
}

#[test]
fn mvp_c_adds_noise() {
    let mut rng = StdRng::seed_from_u64(13);
    let (grid, kernel) = random_kernel(3, 2, 3, false, &mut rng);
    let v = random_tensor(&grid, &mut rng);
    let noise = 0.37;
    let kv = mvp_k(&kernel, &v);
    let cv = mvp_c(&kernel, noise, &v).unwrap();
    for i in 0..grid.len() {
        assert!((cv.as_slice()[i] - kv.as_slice()[i] - noise * v.as_slice()[i]).abs() < 1e-14);
    }
    assert!(mvp_c(&kernel, -1.0, &v).is_err());
}

#[test]
fn mvp_dc_noise_is_identity() {
    let mut rng = StdRng::seed_from_u64(17);
    let (grid, kernel) = random_kernel(3, 2, 3, true, &mut rng);
    let v = random_tensor(&grid, &mut rng);
    let out = mvp_dc(&kernel, HyperParam::Noise, &v).unwrap();
    assert_eq!(out.as_slice(), v.as_slice());
    assert!(mvp_dc(&kernel, HyperParam::OrderVariance(9), &v).is_err());
    assert!(mvp_dc(&kernel, HyperParam::LengthScale(9), &v).is_err());
}

#[cfg(feature = "oracle")]
#[test]
fn mvp_dc_matches_finite_differences() {
    use crate::oracle;
    let mut rng = StdRng::seed_from_u64(19);
    let dims = 3;
    let alpha = 2;
    let grids: Vec<Vec<f64>> = (0..dims).map(|_| random_grid_1d(3, &mut rng)).collect();
    let shape = crate::grid::GridShape::new(grids).unwrap();
    let mcr = ModeCombinationRange::simple(dims, alpha).unwrap();
    let grid = IncompleteGrid::new(shape, mcr.clone()).unwrap();
    let sigma2: Vec<f64> = (0..=alpha).map(|_| rng.gen_range(0.2..0.9)).collect();
    let ell: Vec<f64> = (0..dims).map(|_| rng.gen_range(0.9..2.0)).collect();
    for centered in [false, true] {
        let kernel = AdditiveKernel::assemble(
            grid.clone(),
            mcr.clone(),
            sigma2.clone(),
            ell.clone(),
            centered,
        )
        .unwrap();
        let v = random_tensor(&grid, &mut rng);

        // Length scale derivative vs central differences of the dense matrix.
        let mode = 1;
        let h = 1e-5 * ell[mode];
        let mut ell_p = ell.clone();
        ell_p[mode] += h;
        let mut ell_m = ell.clone();
        ell_m[mode] -= h;
        let kp = AdditiveKernel::assemble(grid.clone(), mcr.clone(), sigma2.clone(), ell_p, centered)
            .unwrap();
        let km = AdditiveKernel::assemble(grid.clone(), mcr.clone(), sigma2.clone(), ell_m, centered)
            .unwrap();
        let dp = oracle::dense_pairwise(&kp, 5000).unwrap();
        let dm = oracle::dense_pairwise(&km, 5000).unwrap();
        let vd = nalgebra::DVector::from_column_slice(v.as_slice());
        let fd = (dp - dm) / (2.0 * h) * &vd;
        let got = mvp_dc(&kernel, HyperParam::LengthScale(mode), &v).unwrap();
        let scale = fd.amax().max(1e-12);
        for i in 0..grid.len() {
            assert!(
                (got.as_slice()[i] - fd[i]).abs() <= 1e-6 * scale,
                "centered={centered} i={i}: {} vs {}",
                got.as_slice()[i],
                fd[i]
            );
        }

        // Order-variance derivative vs the dense pairwise derivative.
        for k in 0..=alpha {
            let dk = oracle::dense_derivative(&kernel, HyperParam::OrderVariance(k), 5000).unwrap();
            let want = &dk * &vd;
            let got = mvp_dc(&kernel, HyperParam::OrderVariance(k), &v).unwrap();
            for i in 0..grid.len() {
                assert!((got.as_slice()[i] - want[i]).abs() < 1e-12 * want.amax().max(1.0));
            }
        }
    }
}

#[test]
fn derivative_m_product_sparsity_pattern() {
    // The length-scale derivative of the M product vanishes outside the
    // union of terms containing the mode and their subsets (the final L
    // product then spreads values, so the pattern holds at this stage).
    let mut rng = StdRng::seed_from_u64(29);
    let (grid, kernel) = random_kernel(4, 2, 3, true, &mut rng);
    let v = random_tensor(&grid, &mut rng);
    let mode = 2;
    let u = mvp_u(&v);
    let mut out = McrTensor::zeros(grid.clone());
    accumulate_m(&kernel, &u, &mut out, &MTermFilter::DerivLengthScale(mode));
    for (id, mc) in grid.mcr().iter().enumerate() {
        // Allowed support for the simple range: every combination of order
        // below alpha, plus order-alpha combinations containing the mode.
        let allowed = mc.order() < 2 || mc.contains(mode);
        let sub = out.subtensor(id);
        if !allowed {
            assert!(
                sub.iter().all(|&x| x == 0.0),
                "expected zero block on {mc}"
            );
        } else if grid.subtensor_len(id) > 0 {
            assert!(sub.iter().any(|&x| x != 0.0), "expected support on {mc}");
        }
    }
}

#[test]
fn quadratic_terms_noise_is_dot() {
    let mut rng = StdRng::seed_from_u64(37);
    let (grid, kernel) = random_kernel(3, 2, 3, true, &mut rng);
    let a = random_tensor(&grid, &mut rng);
    let q = quadratic_terms(&kernel, &a, &a);
    assert!((q.noise - a.dot(&a)).abs() < 1e-14 * a.dot(&a));
}

#[test]
fn quadratic_terms_match_derivative_mvps() {
    let mut rng = StdRng::seed_from_u64(41);
    for centered in [false, true] {
        let (grid, kernel) = random_kernel(4, 2, 3, centered, &mut rng);
        let a = random_tensor(&grid, &mut rng);
        let b = random_tensor(&grid, &mut rng);
        let q = quadratic_terms(&kernel, &a, &b);
        for param in q.params() {
            let want = match param {
                HyperParam::Noise => a.dot(&b),
                _ => a.dot(&mvp_dc(&kernel, param, &b).unwrap()),
            };
            let got = q.get(param);
            let tol = 1e-12 * want.abs().max(1.0);
            assert!(
                (got - want).abs() <= tol,
                "param {param:?}: {got} vs {want}"
            );
        }
    }
}

#[cfg(feature = "oracle")]
#[test]
fn kernel_column_matches_basis_mvp() {
    let mut rng = StdRng::seed_from_u64(43);
    for centered in [false, true] {
        let (grid, kernel) = random_kernel(3, 2, 3, centered, &mut rng);
        for _ in 0..5 {
            let i = rng.gen_range(0..grid.len() as u64);
            let e = McrTensor::basis(grid.clone(), i).unwrap();
            let want = mvp_k(&kernel, &e);
            let got = kernel_column(&kernel, i).unwrap();
            assert!(max_rel_err(&got, &want) < 1e-12);
        }
        assert!(kernel_column(&kernel, grid.len() as u64).is_err());
    }
}

#[test]
fn kernel_column_constant_kernel() {
    let grid = IncompleteGrid::simple(3, 2, vec![0.0, 1.0, 2.0]).unwrap();
    let kernel_mcr = ModeCombinationRange::simple(3, 0).unwrap();
    let sigma0 = 0.9;
    let kernel = AdditiveKernel::assemble(
        grid.clone(),
        kernel_mcr,
        vec![sigma0],
        vec![1.0; 3],
        false,
    )
    .unwrap();
    let col = kernel_column(&kernel, 7).unwrap();
    for &x in col.as_slice() {
        assert!((x - sigma0).abs() < 1e-15);
    }
}

#[test]
fn cross_column_at_training_point_matches_kernel_column() {
    let mut rng = StdRng::seed_from_u64(47);
    for centered in [false, true] {
        let (grid, kernel) = random_kernel(3, 2, 4, centered, &mut rng);
        for _ in 0..5 {
            let i = rng.gen_range(0..grid.len() as u64);
            let (mc_id, a) = grid.locate(i).unwrap();
            let mc = grid.mcr().mc(mc_id);
            let mut coord: Vec<f64> = (0..3).map(|m| grid.shape().reference(m)).collect();
            for (axis, m) in mc.modes().enumerate() {
                coord[m] = grid.shape().grid_1d(m)[a[axis]];
            }
            let want = kernel_column(&kernel, i).unwrap();
            let got = cross_column(&kernel, &coord).unwrap();
            assert!(
                max_rel_err(&got, &want) < 1e-12,
                "centered={centered} point {i}"
            );
        }
    }
}

#[test]
fn diagonal_constant_kernel() {
    let grid = IncompleteGrid::simple(3, 2, vec![0.0, 1.0, 2.0]).unwrap();
    let kernel_mcr = ModeCombinationRange::simple(3, 0).unwrap();
    let kernel =
        AdditiveKernel::assemble(grid.clone(), kernel_mcr, vec![0.42], vec![1.0; 3], false)
            .unwrap();
    let d = kernel_diagonal(&kernel);
    assert!(!d.used_fallback);
    for &x in d.diagonal.as_slice() {
        assert!((x - 0.42).abs() < 1e-15);
    }
}

#[cfg(feature = "oracle")]
#[test]
fn diagonal_matches_dense() {
    use crate::oracle;
    let mut rng = StdRng::seed_from_u64(53);
    for centered in [false, true] {
        let (grid, kernel) = random_kernel(4, 3, 4, centered, &mut rng);
        let dense = oracle::dense_pairwise(&kernel, 5000).unwrap();
        let d = kernel_diagonal(&kernel);
        assert!(!d.used_fallback);
        let scale = dense.diagonal().amax();
        for i in 0..grid.len() {
            assert!(
                (d.diagonal.as_slice()[i] - dense[(i, i)]).abs() <= 1e-12 * scale,
                "centered={centered} i={i}"
            );
        }
        // Diagonal agrees with per-column values.
        for _ in 0..50 {
            let i = rng.gen_range(0..grid.len() as u64);
            let col = kernel_column(&kernel, i).unwrap();
            assert!(
                (col.as_slice()[i as usize] - d.diagonal.as_slice()[i as usize]).abs()
                    <= 1e-12 * scale
            );
        }
    }
}

#[cfg(feature = "oracle")]
#[test]
fn diagonal_fallback_on_degenerate_reference() {
    use crate::oracle;
    // A single-point mode centers its base matrix to exactly zero, so the
    // reference value vanishes and the division-free path must engage.
    let shape =
        crate::grid::GridShape::new(vec![vec![0.0, 1.0, 2.0], vec![0.0], vec![0.0, 1.5, 3.0]])
            .unwrap();
    let mcr = ModeCombinationRange::simple(3, 2).unwrap();
    let grid = IncompleteGrid::new(shape, mcr.clone()).unwrap();
    let kernel =
        AdditiveKernel::assemble(grid.clone(), mcr, vec![0.3, 0.8, 0.6], vec![1.0; 3], true)
            .unwrap();
    let d = kernel_diagonal(&kernel);
    assert!(d.used_fallback);
    let dense = oracle::dense_pairwise(&kernel, 5000).unwrap();
    let scale = dense.diagonal().amax();
    for i in 0..grid.len() {
        assert!((d.diagonal.as_slice()[i] - dense[(i, i)]).abs() <= 1e-12 * scale);
    }
}

#[test]
fn kernel_operator_is_symmetric() {
    let mut rng = StdRng::seed_from_u64(59);
    for centered in [false, true] {
        let (grid, kernel) = random_kernel(4, 2, 3, centered, &mut rng);
        for _ in 0..5 {
            let v = random_tensor(&grid, &mut rng);
            let w = random_tensor(&grid, &mut rng);
            let vkw = v.dot(&mvp_k(&kernel, &w));
            let wkv = w.dot(&mvp_k(&kernel, &v));
            assert!((vkw - wkv).abs() <= 1e-12 * vkw.abs().max(1.0));
        }
    }
}

#[test]
fn kernel_operator_is_positive_semidefinite() {
    let mut rng = StdRng::seed_from_u64(61);
    for centered in [false, true] {
        let (grid, kernel) = random_kernel(4, 2, 3, centered, &mut rng);
        for _ in 0..10 {
            let v = random_tensor(&grid, &mut rng);
            let quad = v.dot(&mvp_k(&kernel, &v));
            assert!(quad >= -1e-10 * v.dot(&v));
        }
    }
}

#[cfg(feature = "oracle")]
#[test]
fn test_test_value_matches_diagonal_at_training_point() {
    let mut rng = StdRng::seed_from_u64(67);
    let (grid, kernel) = random_kernel(3, 2, 3, true, &mut rng);
    let i = 4u64;
    let (mc_id, a) = grid.locate(i).unwrap();
    let mc = grid.mcr().mc(mc_id);
    let mut coord: Vec<f64> = (0..3).map(|m| grid.shape().reference(m)).collect();
    for (axis, m) in mc.modes().enumerate() {
        coord[m] = grid.shape().grid_1d(m)[a[axis]];
    }
    let kss = test_test_value(&kernel, &coord).unwrap();
    let d = kernel_diagonal(&kernel).diagonal;
    assert!((kss - d.as_slice()[i as usize]).abs() < 1e-12);
}
