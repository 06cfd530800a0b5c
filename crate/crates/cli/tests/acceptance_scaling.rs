//! Scaling-slope acceptance: desk-scale benchmark groups must reproduce
//! the low-order polynomial D-scaling and near-linear point-count scaling
//! of the kernel matrix-vector product.

use gridgpr_cli::bench::{self, BenchSpec};

#[test]
fn criterion_05_scaling_slopes() {
    let spec_a2 = BenchSpec {
        alphas: vec![2],
        ns: vec![10],
        dims: vec![64, 91, 128, 181, 256, 362, 512, 724, 1024],
        reps: 5,
        memory_limit_bytes: 9 << 30,
        warmup_seconds: 2.0,
        seed: 0,
        threads: 1,
    };
    let spec_a3 = BenchSpec {
        alphas: vec![3],
        ns: vec![5],
        dims: vec![32, 38, 45, 54, 64, 76, 91, 108, 128, 152, 181, 215, 256],
        reps: 5,
        ..spec_a2.clone()
    };

    let mut records = bench::run(&spec_a2).expect("alpha=2 group");
    records.extend(bench::run(&spec_a3).expect("alpha=3 group"));
    let fits = bench::fit_power_laws(&records).expect("power-law fits");

    let mut summary = Vec::new();
    for (alpha, n) in [(2usize, 10usize), (3, 5)] {
        let d_fit = fits
            .iter()
            .find(|f| f.alpha == alpha && f.n == n && f.against == "dims")
            .unwrap();
        assert!(
            (d_fit.slope - alpha as f64).abs() <= 0.3,
            "alpha={alpha}: dimension slope {:.3} outside {} +- 0.3",
            d_fit.slope,
            alpha
        );
        let n_fit = fits
            .iter()
            .find(|f| f.alpha == alpha && f.n == n && f.against == "n_hat")
            .unwrap();
        assert!(
            n_fit.slope >= 0.9 && n_fit.slope <= 1.15,
            "alpha={alpha}: point-count slope {:.3} outside [0.9, 1.15]",
            n_fit.slope
        );
        summary.push(format!(
            "alpha={alpha}: D-slope {:.3}, point slope {:.3}",
            d_fit.slope, n_fit.slope
        ));
    }
    println!(
        "criterion 5 (scaling slopes): PASS - {}",
        summary.join("; ")
    );
}
