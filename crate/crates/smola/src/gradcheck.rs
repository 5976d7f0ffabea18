//! Finite-difference verification of the analytic backward passes.
//!
//! The numeric side only ever calls `forward`, so it stays independent of
//! the gradient code it checks. Loss is `sum(upstream . Y)` for a fixed
//! random upstream; every trainable scalar (and every input entry) is
//! perturbed by a central difference.

use serde::Serialize;

use crate::block::{SmolaBlock, SmolaConfig};
use crate::error::Result;
use crate::numkit::{derive_seed, Matrix, Rng};
use crate::omni::{Modality, OmniAdapter, TokenBatch};

/// Tolerances and step size for a finite-difference run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradCheckSettings {
    pub fd_step: f64,
    pub tol_rel: f64,
    pub tol_abs: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            tol_rel: 1e-6,
            tol_abs: 1e-9,
        }
    }
}

impl GradCheckSettings {
    /// A scalar passes if it meets the absolute floor or the relative bound.
    fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= self.tol_abs || diff <= self.tol_rel * analytic.abs().max(numeric.abs())
    }
}

/// Worst observed deviation for one parameter group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub group: &'static str,
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_rel_err: f64,
}

impl GroupReport {
    fn new(group: &'static str) -> Self {
        Self {
            group,
            checked: 0,
            failures: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, settings: &GradCheckSettings) {
        let diff = (analytic - numeric).abs();
        self.checked += 1;
        if !settings.accepts(analytic, numeric) {
            self.failures += 1;
        }
        self.max_abs_err = self.max_abs_err.max(diff);
        self.max_rel_err = self
            .max_rel_err
            .max(diff / analytic.abs().max(numeric.abs()).max(1.0));
    }

    fn merge(&mut self, other: &GroupReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

const GROUPS: [&str; 5] = ["phi", "alpha", "w_in", "w_out", "input"];

fn group_index(name: &str) -> usize {
    GROUPS.iter().position(|&g| g == name).unwrap()
}

/// Checks one block's analytic gradients against central differences.
pub fn check_block(
    block: &SmolaBlock,
    x: &Matrix,
    upstream: &Matrix,
    settings: &GradCheckSettings,
) -> Result<Vec<GroupReport>> {
    let (_, cache) = block.forward(x)?;
    let grads = block.backward(&cache, upstream)?;
    let mut reports: Vec<GroupReport> = GROUPS.iter().map(|g| GroupReport::new(g)).collect();
    let h = settings.fd_step;

    let loss = |b: &SmolaBlock, input: &Matrix| -> Result<f64> {
        let (y, _) = b.forward(input)?;
        Ok(dot(&y, upstream))
    };

    for idx in 0..block.phi.data().len() {
        let numeric = {
            let mut plus = block.clone();
            plus.phi.data_mut()[idx] += h;
            let mut minus = block.clone();
            minus.phi.data_mut()[idx] -= h;
            (loss(&plus, x)? - loss(&minus, x)?) / (2.0 * h)
        };
        reports[group_index("phi")].record(grads.d_phi.data()[idx], numeric, settings);
    }
    {
        let mut plus = block.clone();
        plus.alpha += h;
        let mut minus = block.clone();
        minus.alpha -= h;
        let numeric = (loss(&plus, x)? - loss(&minus, x)?) / (2.0 * h);
        reports[group_index("alpha")].record(grads.d_alpha, numeric, settings);
    }
    for e in 0..block.experts.len() {
        for idx in 0..block.experts[e].w_in.data().len() {
            let numeric = {
                let mut plus = block.clone();
                plus.experts[e].w_in.data_mut()[idx] += h;
                let mut minus = block.clone();
                minus.experts[e].w_in.data_mut()[idx] -= h;
                (loss(&plus, x)? - loss(&minus, x)?) / (2.0 * h)
            };
            reports[group_index("w_in")].record(
                grads.d_experts[e].w_in.data()[idx],
                numeric,
                settings,
            );
        }
        for idx in 0..block.experts[e].w_out.data().len() {
            let numeric = {
                let mut plus = block.clone();
                plus.experts[e].w_out.data_mut()[idx] += h;
                let mut minus = block.clone();
                minus.experts[e].w_out.data_mut()[idx] -= h;
                (loss(&plus, x)? - loss(&minus, x)?) / (2.0 * h)
            };
            reports[group_index("w_out")].record(
                grads.d_experts[e].w_out.data()[idx],
                numeric,
                settings,
            );
        }
    }
    for idx in 0..x.data().len() {
        let numeric = {
            let mut plus = x.clone();
            plus.data_mut()[idx] += h;
            let mut minus = x.clone();
            minus.data_mut()[idx] -= h;
            (loss(block, &plus)? - loss(block, &minus)?) / (2.0 * h)
        };
        reports[group_index("input")].record(grads.d_input.data()[idx], numeric, settings);
    }
    Ok(reports)
}

/// Checks all three omni blocks' parameters jointly, plus the input.
pub fn check_omni(
    adapter: &OmniAdapter,
    batch: &TokenBatch,
    upstream: &Matrix,
    settings: &GradCheckSettings,
) -> Result<Vec<GroupReport>> {
    let (_, cache) = adapter.forward(batch)?;
    let grads = adapter.backward(&cache, upstream)?;
    let mut reports: Vec<GroupReport> = GROUPS.iter().map(|g| GroupReport::new(g)).collect();
    let h = settings.fd_step;

    let loss = |a: &OmniAdapter, b: &TokenBatch| -> Result<f64> {
        let (y, _) = a.forward(b)?;
        Ok(dot(&y, upstream))
    };

    let analytic_blocks = [&grads.block_v, &grads.block_t, &grads.block_mm];
    for which in 0..3 {
        let block = pick_block(adapter, which);
        let analytic = analytic_blocks[which];

        for idx in 0..block.phi.data().len() {
            let numeric = {
                let mut plus = adapter.clone();
                pick_block_mut(&mut plus, which).phi.data_mut()[idx] += h;
                let mut minus = adapter.clone();
                pick_block_mut(&mut minus, which).phi.data_mut()[idx] -= h;
                (loss(&plus, batch)? - loss(&minus, batch)?) / (2.0 * h)
            };
            reports[group_index("phi")].record(analytic.d_phi.data()[idx], numeric, settings);
        }
        {
            let mut plus = adapter.clone();
            pick_block_mut(&mut plus, which).alpha += h;
            let mut minus = adapter.clone();
            pick_block_mut(&mut minus, which).alpha -= h;
            let numeric = (loss(&plus, batch)? - loss(&minus, batch)?) / (2.0 * h);
            reports[group_index("alpha")].record(analytic.d_alpha, numeric, settings);
        }
        for e in 0..block.experts.len() {
            for idx in 0..block.experts[e].w_in.data().len() {
                let numeric = {
                    let mut plus = adapter.clone();
                    pick_block_mut(&mut plus, which).experts[e].w_in.data_mut()[idx] += h;
                    let mut minus = adapter.clone();
                    pick_block_mut(&mut minus, which).experts[e].w_in.data_mut()[idx] -= h;
                    (loss(&plus, batch)? - loss(&minus, batch)?) / (2.0 * h)
                };
                reports[group_index("w_in")].record(
                    analytic.d_experts[e].w_in.data()[idx],
                    numeric,
                    settings,
                );
            }
            for idx in 0..block.experts[e].w_out.data().len() {
                let numeric = {
                    let mut plus = adapter.clone();
                    pick_block_mut(&mut plus, which).experts[e].w_out.data_mut()[idx] += h;
                    let mut minus = adapter.clone();
                    pick_block_mut(&mut minus, which).experts[e].w_out.data_mut()[idx] -= h;
                    (loss(&plus, batch)? - loss(&minus, batch)?) / (2.0 * h)
                };
                reports[group_index("w_out")].record(
                    analytic.d_experts[e].w_out.data()[idx],
                    numeric,
                    settings,
                );
            }
        }
    }
    for idx in 0..batch.x.data().len() {
        let numeric = {
            let mut plus = batch.clone();
            plus.x.data_mut()[idx] += h;
            let mut minus = batch.clone();
            minus.x.data_mut()[idx] -= h;
            (loss(adapter, &plus)? - loss(adapter, &minus)?) / (2.0 * h)
        };
        reports[group_index("input")].record(grads.d_input.data()[idx], numeric, settings);
    }
    Ok(reports)
}

fn pick_block(adapter: &OmniAdapter, which: usize) -> &SmolaBlock {
    match which {
        0 => &adapter.block_v,
        1 => &adapter.block_t,
        _ => &adapter.block_mm,
    }
}

fn pick_block_mut(adapter: &mut OmniAdapter, which: usize) -> &mut SmolaBlock {
    match which {
        0 => &mut adapter.block_v,
        1 => &mut adapter.block_t,
        _ => &mut adapter.block_mm,
    }
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).sum()
}

/// Aggregated result of a multi-case run.
#[derive(Debug, Serialize)]
pub struct SuiteReport {
    pub cases: usize,
    pub settings: GradCheckSettings,
    pub groups: Vec<GroupReport>,
    pub pass: bool,
}

/// Runs `num_cases` seeded random small configurations, alternating between
/// a single block and a full omni adapter, and aggregates worst errors per
/// parameter group. Dimensions stay small (d <= 8, E <= 4, r <= 2, N <= 5)
/// so central differences are trustworthy.
pub fn run_suite(num_cases: usize, seed: u64, settings: &GradCheckSettings) -> Result<SuiteReport> {
    let mut groups: Vec<GroupReport> = GROUPS.iter().map(|g| GroupReport::new(g)).collect();
    for case in 0..num_cases {
        let case_seed = derive_seed(seed, case as u64);
        let reports = if case % 2 == 0 {
            let (block, x, upstream) = random_block_case(case_seed);
            check_block(&block, &x, &upstream, settings)?
        } else {
            let (adapter, batch, upstream) = random_omni_case(case_seed);
            check_omni(&adapter, &batch, &upstream, settings)?
        };
        for (agg, rep) in groups.iter_mut().zip(reports.iter()) {
            agg.merge(rep);
        }
    }
    let pass = groups.iter().all(|g| g.failures == 0);
    Ok(SuiteReport {
        cases: num_cases,
        settings: *settings,
        groups,
        pass,
    })
}

/// Random small block with nonzero output factors (so routing gradients are
/// exercised), plus input and upstream.
pub fn random_block_case(seed: u64) -> (SmolaBlock, Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    let d_in = 1 + rng.next_index(8);
    let d_out = 1 + rng.next_index(8);
    let num_experts = 1 + rng.next_index(4);
    let rank = 1 + rng.next_index(2.min(d_in.min(d_out)));
    let n = 1 + rng.next_index(5);
    let cfg = SmolaConfig {
        num_experts,
        rank,
        d_in,
        d_out,
        alpha_init: 0.5 + rng.next_f64(),
        init_scale: 1.0,
        seed: derive_seed(seed, 1),
    };
    let base = Matrix::from_fn(d_in, d_out, |_, _| rng.next_gaussian());
    let mut block = SmolaBlock::init(cfg, std::sync::Arc::new(base)).unwrap();
    for expert in &mut block.experts {
        let (r, c) = expert.w_out.shape();
        expert.w_out = Matrix::from_fn(r, c, |_, _| rng.next_gaussian() * 0.6);
    }
    let x = Matrix::from_fn(n, d_in, |_, _| rng.next_gaussian());
    let upstream = Matrix::from_fn(n, d_out, |_, _| rng.next_gaussian());
    (block, x, upstream)
}

/// Random small omni adapter over a mixed-modality batch. Modality labels
/// are random, so single-modality partitions are sometimes empty and the
/// skip path gets exercised too.
pub fn random_omni_case(seed: u64) -> (OmniAdapter, TokenBatch, Matrix) {
    let mut rng = Rng::new(seed);
    let d_in = 1 + rng.next_index(8);
    let d_out = 1 + rng.next_index(8);
    let n = 1 + rng.next_index(5);
    let base = std::sync::Arc::new(Matrix::from_fn(d_in, d_out, |_, _| rng.next_gaussian()));

    let make_block = |tag: u64, rng: &mut Rng| {
        let num_experts = 1 + rng.next_index(4);
        let rank = 1 + rng.next_index(2.min(d_in.min(d_out)));
        let cfg = SmolaConfig {
            num_experts,
            rank,
            d_in,
            d_out,
            alpha_init: 0.5 + rng.next_f64(),
            init_scale: 1.0,
            seed: derive_seed(seed, tag),
        };
        let mut block = SmolaBlock::init(cfg, base.clone()).unwrap();
        for expert in &mut block.experts {
            let (r, c) = expert.w_out.shape();
            expert.w_out = Matrix::from_fn(r, c, |_, _| rng.next_gaussian() * 0.6);
        }
        block
    };
    let block_v = make_block(2, &mut rng);
    let block_t = make_block(3, &mut rng);
    let block_mm = make_block(4, &mut rng);
    let adapter = OmniAdapter::new(block_v, block_t, block_mm).unwrap();

    let x = Matrix::from_fn(n, d_in, |_, _| rng.next_gaussian());
    let modality = (0..n)
        .map(|_| {
            if rng.next_f64() < 0.5 {
                Modality::Visual
            } else {
                Modality::Text
            }
        })
        .collect();
    let batch = TokenBatch::new(x, modality).unwrap();
    let upstream = Matrix::from_fn(n, d_out, |_, _| rng.next_gaussian());
    (adapter, batch, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_gradients_match_finite_differences() {
        let settings = GradCheckSettings::default();
        for case in 0..10 {
            let (block, x, upstream) = random_block_case(derive_seed(777, case));
            let reports = check_block(&block, &x, &upstream, &settings).unwrap();
            for r in &reports {
                assert_eq!(
                    r.failures, 0,
                    "case {case} group {}: max abs err {:e}",
                    r.group, r.max_abs_err
                );
            }
        }
    }

    #[test]
    fn omni_gradients_match_finite_differences() {
        let settings = GradCheckSettings::default();
        for case in 0..10 {
            let (adapter, batch, upstream) = random_omni_case(derive_seed(778, case));
            let reports = check_omni(&adapter, &batch, &upstream, &settings).unwrap();
            for r in &reports {
                assert_eq!(
                    r.failures, 0,
                    "case {case} group {}: max abs err {:e}",
                    r.group, r.max_abs_err
                );
            }
        }
    }

    #[test]
    fn suite_aggregates_and_passes() {
        let report = run_suite(6, 31337, &GradCheckSettings::default()).unwrap();
        assert!(report.pass);
        assert_eq!(report.groups.len(), 5);
        assert!(report.groups.iter().all(|g| g.checked > 0));
    }

    #[test]
    fn e1_single_expert_still_passes() {
        // Degenerate combiner: softmax over one expert is identically 1.
        let mut rng = Rng::new(404);
        let cfg = SmolaConfig {
            num_experts: 1,
            rank: 1,
            d_in: 3,
            d_out: 2,
            alpha_init: 1.0,
            init_scale: 1.0,
            seed: 404,
        };
        let base = Matrix::from_fn(3, 2, |_, _| rng.next_gaussian());
        let mut block = SmolaBlock::init(cfg, std::sync::Arc::new(base)).unwrap();
        for expert in &mut block.experts {
            let (r, c) = expert.w_out.shape();
            expert.w_out = Matrix::from_fn(r, c, |_, _| rng.next_gaussian() * 0.6);
        }
        let x = Matrix::from_fn(4, 3, |_, _| rng.next_gaussian());
        let upstream = Matrix::from_fn(4, 2, |_, _| rng.next_gaussian());
        let reports = check_block(&block, &x, &upstream, &GradCheckSettings::default()).unwrap();
        for r in &reports {
            assert_eq!(r.failures, 0, "group {} failed", r.group);
        }
    }
}
