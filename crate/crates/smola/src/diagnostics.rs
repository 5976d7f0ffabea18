//! Cost accounting, routing-matrix heat maps, singular-value threshold
//! counting, and a throughput microbenchmark.
//!
//! The cost model counts multiply-adds (one fused multiply and accumulate).
//! Softmax and normalization exponentials are excluded from the multiply-add
//! totals and reported separately as nonlinearity ops, informational only.

use std::time::Instant;

use serde::Serialize;

use crate::block::{MaddBreakdown, SmolaBlock, SmolaConfig};
use crate::error::{Result, SmolaError};
use crate::numkit::{jacobi_svd, Matrix, Rng, NORM_EPSILON};

/// Threshold fractions for singular-value counting: 0.01%, 0.1%, 1%, 5%,
/// 10% of the largest singular value.
pub const THRESHOLD_FRACTIONS: [f64; 5] = [1e-4, 1e-3, 1e-2, 5e-2, 1e-1];

/// Closed-form multiply-add counts for one block forward pass, decomposed by
/// term, plus the adapter parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostReport {
    /// `N * d_in * d_out` for the frozen layer itself.
    pub base_madds: u64,
    /// `E * d_in * N` for the routing logits.
    pub routing_madds: u64,
    /// `E * N * d_in` for the dispatched inputs.
    pub dispatch_madds: u64,
    /// `E * (r * d_in + r * d_out)` for the factor pairs.
    pub expert_madds: u64,
    /// `E * N * d_out` for projecting expert outputs back to tokens.
    pub combine_madds: u64,
    /// `E * d_in + 1 + E * r * (d_in + d_out)` trainable scalars.
    pub extra_params: u64,
    /// Softmax/normalization exponential evaluations (informational; not
    /// part of the multiply-add totals).
    pub nonlinearity_ops: u64,
    pub d_max: u64,
}

impl CostReport {
    pub fn extra_madds(&self) -> u64 {
        self.routing_madds + self.dispatch_madds + self.expert_madds + self.combine_madds
    }

    pub fn extra_over_base(&self) -> f64 {
        self.extra_madds() as f64 / self.base_madds as f64
    }
}

/// Evaluates the per-layer complexity expression for a config and a token
/// count.
pub fn count_costs(cfg: &SmolaConfig, n_tokens: usize) -> CostReport {
    let e = cfg.num_experts as u64;
    let r = cfg.rank as u64;
    let d_in = cfg.d_in as u64;
    let d_out = cfg.d_out as u64;
    let n = n_tokens as u64;
    CostReport {
        base_madds: n * d_in * d_out,
        routing_madds: e * d_in * n,
        dispatch_madds: e * n * d_in,
        expert_madds: e * (r * d_in + r * d_out),
        combine_madds: e * n * d_out,
        extra_params: e * d_in + 1 + e * r * (d_in + d_out),
        // One exp per dispatch entry and one per combine entry.
        nonlinearity_ops: 2 * e * n,
        d_max: d_in.max(d_out),
    }
}

/// Runs a real forward pass with counting kernels and returns the measured
/// per-stage multiply-adds. This is the measurement side of the cost model;
/// [`count_costs`] is the closed form.
pub fn instrumented_forward(block: &SmolaBlock, x: &Matrix) -> Result<(Matrix, MaddBreakdown)> {
    let (y, _, tally) = block.forward_counted(x)?;
    Ok((y, tally))
}

/// Gram heat map of the routing matrix: rows of phi l2-normalized, then
/// `norm(Phi) norm(Phi)^T`. When this is close to the identity the block
/// routes inputs to well-separated experts.
#[derive(Debug, Clone, Serialize)]
pub struct HeatmapReport {
    pub num_experts: usize,
    /// Row-major `E x E` Gram entries.
    pub gram: Vec<Vec<f64>>,
    /// Mean absolute off-diagonal entry; 0 for a perfectly separated block.
    pub identity_distance: f64,
}

pub fn phi_gram(block: &SmolaBlock) -> Result<HeatmapReport> {
    phi_gram_of(&block.phi)
}

/// Same as [`phi_gram`] but directly from a routing matrix.
pub fn phi_gram_of(phi: &Matrix) -> Result<HeatmapReport> {
    let normalized = phi.l2_normalize_rows(NORM_EPSILON);
    let gram = normalized.matmul(&normalized.transpose())?;
    let e = gram.rows();
    let mut off_sum = 0.0;
    for i in 0..e {
        for j in 0..e {
            if i != j {
                off_sum += gram.get(i, j).abs();
            }
        }
    }
    let off_count = e * e - e;
    let identity_distance = if off_count == 0 {
        0.0
    } else {
        off_sum / off_count as f64
    };
    Ok(HeatmapReport {
        num_experts: e,
        gram: (0..e).map(|i| gram.row(i).to_vec()).collect(),
        identity_distance,
    })
}

/// Singular values of a matrix plus the number exceeding each threshold
/// fraction of the largest.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    /// `(fraction, count)` pairs in the order of [`THRESHOLD_FRACTIONS`].
    pub counts_at: Vec<(f64, usize)>,
}

impl SpectrumReport {
    pub fn count_at(&self, fraction: f64) -> Option<usize> {
        self.counts_at
            .iter()
            .find(|(f, _)| *f == fraction)
            .map(|(_, c)| *c)
    }
}

/// Computes the singular spectrum and threshold counts. A zero matrix
/// reports an all-zero spectrum with zero counts.
pub fn effective_rank(m: &Matrix) -> Result<SpectrumReport> {
    let svd = jacobi_svd(m)?;
    let sigma_max = svd.singular_values.first().copied().unwrap_or(0.0);
    let counts_at = THRESHOLD_FRACTIONS
        .iter()
        .map(|&f| {
            let cutoff = f * sigma_max;
            let count = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
            (f, count)
        })
        .collect();
    Ok(SpectrumReport {
        singular_values: svd.singular_values,
        counts_at,
    })
}

/// Throughput measurement for one variant: examples per second over the
/// measured repeats (mean, standard deviation, median).
#[derive(Debug, Clone, Serialize)]
pub struct ThroughputStats {
    pub eps_mean: f64,
    pub eps_stddev: f64,
    pub eps_median: f64,
    pub seconds_per_example_median: f64,
}

/// Dense-vs-adapter throughput comparison at one configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ThroughputReport {
    pub num_experts: usize,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub n_tokens: usize,
    pub batch: usize,
    pub repeats: usize,
    pub dense: ThroughputStats,
    pub adapter: ThroughputStats,
    /// `(t_adapter - t_dense) / t_dense * 100`, computed on medians.
    pub overhead_percent: f64,
}

/// Benchmark shape. Unlike [`SmolaConfig`] this allows `num_experts == 0`,
/// meaning the adapter variant is the dense computation itself.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BenchConfig {
    pub num_experts: usize,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
}

/// Measures wall-clock throughput of (a) the dense `X W*` product and (b)
/// the full adapter forward at the same shapes. Each repeat times `batch`
/// forward passes; two warmup repeats are discarded. With zero experts both
/// variants are the same measurement by construction and the overhead is
/// exactly zero.
pub fn bench_throughput(
    cfg: &BenchConfig,
    n_tokens: usize,
    batch: usize,
    repeats: usize,
    seed: u64,
) -> Result<ThroughputReport> {
    if repeats < 3 {
        return Err(SmolaError::InvalidConfig {
            reason: format!("bench repeats must be at least 3, got {repeats}"),
        });
    }
    if batch == 0 || n_tokens == 0 || cfg.d_in == 0 || cfg.d_out == 0 {
        return Err(SmolaError::InvalidConfig {
            reason: "bench shapes must be nonzero".into(),
        });
    }

    let mut rng = Rng::new(seed);
    let base = std::sync::Arc::new(Matrix::from_fn(cfg.d_in, cfg.d_out, |_, _| {
        rng.next_gaussian() / (cfg.d_in as f64).sqrt()
    }));
    let x = Matrix::from_fn(n_tokens, cfg.d_in, |_, _| rng.next_gaussian());

    let dense_samples = time_repeats(repeats, batch, || {
        let y = x.matmul(&base).unwrap();
        std::hint::black_box(y.get(0, 0));
    });

    let adapter_samples = if cfg.num_experts == 0 {
        dense_samples.clone()
    } else {
        let smola_cfg = SmolaConfig {
            num_experts: cfg.num_experts,
            rank: cfg.rank,
            d_in: cfg.d_in,
            d_out: cfg.d_out,
            alpha_init: 1.0,
            init_scale: 1.0,
            seed,
        };
        let mut block = SmolaBlock::init(smola_cfg, base.clone())?;
        // Nonzero output factors so nothing can short-circuit.
        let mut wrng = Rng::new(seed ^ 0xF00D);
        for expert in &mut block.experts {
            let (r, c) = expert.w_out.shape();
            expert.w_out = Matrix::from_fn(r, c, |_, _| wrng.next_gaussian() * 0.1);
        }
        time_repeats(repeats, batch, || {
            let (y, _) = block.forward(&x).unwrap();
            std::hint::black_box(y.get(0, 0));
        })
    };

    let dense = summarize(&dense_samples, batch);
    let adapter = summarize(&adapter_samples, batch);
    let overhead_percent = if cfg.num_experts == 0 {
        0.0
    } else {
        (adapter.seconds_per_example_median - dense.seconds_per_example_median)
            / dense.seconds_per_example_median
            * 100.0
    };

    Ok(ThroughputReport {
        num_experts: cfg.num_experts,
        rank: cfg.rank,
        d_in: cfg.d_in,
        d_out: cfg.d_out,
        n_tokens,
        batch,
        repeats,
        dense,
        adapter,
        overhead_percent,
    })
}

fn time_repeats(repeats: usize, batch: usize, mut work: impl FnMut()) -> Vec<f64> {
    // Warmup repeats are measured and discarded.
    for _ in 0..2 {
        for _ in 0..batch {
            work();
        }
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for _ in 0..batch {
            work();
        }
        samples.push(start.elapsed().as_secs_f64());
    }
    samples
}

fn summarize(samples: &[f64], batch: usize) -> ThroughputStats {
    let eps: Vec<f64> = samples.iter().map(|&t| batch as f64 / t).collect();
    let mean = eps.iter().sum::<f64>() / eps.len() as f64;
    let var = eps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / eps.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_time = sorted[sorted.len() / 2];
    ThroughputStats {
        eps_mean: mean,
        eps_stddev: var.sqrt(),
        eps_median: batch as f64 / median_time,
        seconds_per_example_median: median_time / batch as f64,
    }
}

/// Least-squares line fit returning `(slope, intercept, r_squared)`.
pub fn affine_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r_squared)
}
