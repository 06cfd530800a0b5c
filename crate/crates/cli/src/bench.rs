//! Matrix-vector-product scaling benchmarks and power-law fits.
//!
//! Each instance assembles an uncentered kernel with seeded random
//! hyperparameters over a uniform grid, warms up for a minimum wall time,
//! then reports the median of the timed repetitions. Memory demand is
//! estimated up front from the vector and table sizes; instances that do
//! not fit are refused with the estimate.

use std::time::Instant;

use gridgpr::fastmvp;
use gridgpr::grid::{grid_size, IncompleteGrid, McrTensor, ModeCombinationRange};
use gridgpr::kernel::AdditiveKernel;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub alphas: Vec<usize>,
    pub ns: Vec<usize>,
    pub dims: Vec<usize>,
    pub reps: usize,
    pub memory_limit_bytes: u64,
    pub warmup_seconds: f64,
    pub seed: u64,
    /// Concurrent MVP streams; timings with more than one stream measure
    /// throughput, not latency, and are not suitable for slope fits.
    pub threads: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            alphas: vec![2],
            ns: vec![10],
            dims: vec![64, 128, 256],
            reps: 3,
            memory_limit_bytes: 8 << 30,
            warmup_seconds: 2.0,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub alpha: usize,
    pub n: usize,
    pub dims: usize,
    pub n_hat: u64,
    pub reps: usize,
    /// Wall seconds per kernel MVP (median over repetitions).
    pub seconds: f64,
}

/// Estimated peak memory of one benchmark instance in bytes.
pub fn estimate_bytes(alpha: usize, n: usize, dims: usize) -> Result<u64, CliError> {
    let mcr = ModeCombinationRange::simple(dims, alpha)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let n_hat = grid_size(&mcr, &vec![n; dims]).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut combos: u64 = 0;
    let mut edges: u64 = 0;
    let mut subsets: u64 = 0;
    let mut binom: u64 = 1;
    combos += binom;
    subsets += binom;
    for k in 1..=alpha as u64 {
        binom = binom * (dims as u64 - k + 1) / k;
        combos += binom;
        edges += binom * k;
        subsets += binom << k;
    }
    // Three resident vectors per MVP, plus index tables.
    let vectors = 3u64.saturating_mul(n_hat).saturating_mul(8);
    let tables = combos
        .saturating_mul(96)
        .saturating_add(edges.saturating_mul(16))
        .saturating_add(subsets.saturating_mul(4));
    Ok(vectors.saturating_add(tables))
}

/// Runs the configured instances. Refuses up front, listing every instance
/// whose memory estimate exceeds the limit.
pub fn run(spec: &BenchSpec) -> Result<Vec<BenchRecord>, CliError> {
    if spec.reps == 0 {
        return Err(CliError::Usage("reps must be at least 1".into()));
    }
    let mut instances = Vec::new();
    let mut refused = Vec::new();
    for &alpha in &spec.alphas {
        for &n in &spec.ns {
            for &dims in &spec.dims {
                let bytes = estimate_bytes(alpha, n, dims)?;
                if bytes > spec.memory_limit_bytes {
                    refused.push(format!(
                        "(alpha={alpha}, n={n}, dims={dims}) needs about {:.2} GiB",
                        bytes as f64 / (1u64 << 30) as f64
                    ));
                } else {
                    instances.push((alpha, n, dims));
                }
            }
        }
    }
    if !refused.is_empty() {
        return Err(CliError::Usage(format!(
            "memory limit exceeded for: {}",
            refused.join("; ")
        )));
    }

    let mut records = Vec::with_capacity(instances.len());
    for (alpha, n, dims) in instances {
        records.push(run_instance(spec, alpha, n, dims)?);
    }
    Ok(records)
}

fn run_instance(
    spec: &BenchSpec,
    alpha: usize,
    n: usize,
    dims: usize,
) -> Result<BenchRecord, CliError> {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    let mut rng = StdRng::seed_from_u64(
        spec.seed ^ ((alpha as u64) << 40) ^ ((n as u64) << 20) ^ dims as u64,
    );
    let grid_1d: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let grid = IncompleteGrid::simple(dims, alpha, grid_1d)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mcr = grid.mcr().clone();
    let sigma2: Vec<f64> = (0..=alpha).map(|_| rng.gen_range(0.1..1.0)).collect();
    let ell: Vec<f64> = (0..dims)
        .map(|_| rng.gen_range(0.5..1.5) * n as f64)
        .collect();
    let kernel = AdditiveKernel::assemble(grid.clone(), mcr, sigma2, ell, false)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let data: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v = McrTensor::from_vec(grid.clone(), data).unwrap();
    let mut scratch = McrTensor::zeros(grid.clone());
    let mut out = McrTensor::zeros(grid.clone());

    // Warm up for at least the configured wall time.
    let warmup = Instant::now();
    loop {
        fastmvp::mvp_k_reusing(&kernel, &v, &mut scratch, &mut out);
        std::hint::black_box(out.as_slice());
        if warmup.elapsed().as_secs_f64() >= spec.warmup_seconds {
            break;
        }
    }

    let seconds = if spec.threads > 1 {
        // Throughput mode: distribute the repetitions over worker threads,
        // one buffer set per stream.
        let pool = rayon_pool(spec.threads)?;
        let start = Instant::now();
        pool.scope(|s| {
            for _ in 0..spec.reps {
                s.spawn(|_| {
                    let res = fastmvp::mvp_k(&kernel, &v);
                    std::hint::black_box(res.as_slice());
                });
            }
        });
        start.elapsed().as_secs_f64() / spec.reps as f64
    } else {
        let mut times = Vec::with_capacity(spec.reps);
        for _ in 0..spec.reps {
            let start = Instant::now();
            fastmvp::mvp_k_reusing(&kernel, &v, &mut scratch, &mut out);
            std::hint::black_box(out.as_slice());
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times[times.len() / 2]
    };

    Ok(BenchRecord {
        alpha,
        n,
        dims,
        n_hat: grid.len() as u64,
        reps: spec.reps,
        seconds,
    })
}

fn rayon_pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))
}

/// One least-squares power-law fit `log t = slope * log x + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerLawFit {
    pub alpha: usize,
    pub n: usize,
    /// What the abscissa is: `dims` or `n_hat`.
    pub against: &'static str,
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Fits per-(alpha, n) power laws against both the dimension count and the
/// grid size. Groups with fewer than three points are refused.
pub fn fit_power_laws(records: &[BenchRecord]) -> Result<Vec<PowerLawFit>, CliError> {
    let mut groups: Vec<(usize, usize)> = records.iter().map(|r| (r.alpha, r.n)).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut fits = Vec::new();
    for (alpha, n) in groups {
        let members: Vec<&BenchRecord> = records
            .iter()
            .filter(|r| r.alpha == alpha && r.n == n)
            .collect();
        if members.len() < 3 {
            return Err(CliError::Usage(format!(
                "group (alpha={alpha}, n={n}) has only {} points; at least 3 are needed for a fit",
                members.len()
            )));
        }
        for (against, xs) in [
            (
                "dims",
                members.iter().map(|r| r.dims as f64).collect::<Vec<_>>(),
            ),
            (
                "n_hat",
                members.iter().map(|r| r.n_hat as f64).collect::<Vec<_>>(),
            ),
        ] {
            let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
            let ly: Vec<f64> = members.iter().map(|r| r.seconds.ln()).collect();
            let (slope, intercept) = least_squares(&lx, &ly);
            fits.push(PowerLawFit {
                alpha,
                n,
                against,
                slope,
                intercept,
                points: members.len(),
            });
        }
    }
    Ok(fits)
}

fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    (slope, intercept)
}

pub fn write_csv(path: &std::path::Path, records: &[BenchRecord]) -> Result<(), CliError> {
    let mut out = String::from("alpha,n,dims,n_hat,reps,seconds\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{:e}\n",
            r.alpha, r.n, r.dims, r.n_hat, r.reps, r.seconds
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_csv(path: &std::path::Path) -> Result<Vec<BenchRecord>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Usage("empty benchmark file".into()))?;
    if header.trim() != "alpha,n,dims,n_hat,reps,seconds" {
        return Err(CliError::Usage(format!(
            "unexpected benchmark header: {header}"
        )));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(CliError::Usage(format!(
                "line {}: expected 6 fields",
                lineno + 2
            )));
        }
        let parse_err =
            |what: &str| CliError::Usage(format!("line {}: bad {what}", lineno + 2));
        records.push(BenchRecord {
            alpha: fields[0].parse().map_err(|_| parse_err("alpha"))?,
            n: fields[1].parse().map_err(|_| parse_err("n"))?,
            dims: fields[2].parse().map_err(|_| parse_err("dims"))?,
            n_hat: fields[3].parse().map_err(|_| parse_err("n_hat"))?,
            reps: fields[4].parse().map_err(|_| parse_err("reps"))?,
            seconds: fields[5].parse().map_err(|_| parse_err("seconds"))?,
        });
    }
    Ok(records)
}
