//! The SMoLA block: soft routing over zero-initialized low-rank experts
//! attached to one frozen linear layer.
//!
//! Logits are `alpha * norm(Phi) * norm(X)^T` with l2-normalized rows on both
//! sides. The dispatcher is the softmax over tokens (each expert row sums
//! to 1), the combiner the softmax over experts (each token column sums
//! to 1). Expert `i` maps its dispatched input slice through a rank-`r`
//! factor pair, and the combiner projects the stacked expert outputs back to
//! token space, added residually to `X W*`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmolaError};
use crate::numkit::{Axis, Matrix, Rng, NORM_EPSILON};

/// Hyperparameters of a single SMoLA block.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SmolaConfig {
    pub num_experts: usize,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub alpha_init: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl SmolaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(SmolaError::InvalidConfig { reason });
        if self.num_experts == 0 {
            return fail("num_experts must be at least 1".into());
        }
        if self.rank == 0 {
            return fail("rank must be at least 1".into());
        }
        if self.d_in == 0 || self.d_out == 0 {
            return fail("d_in and d_out must be at least 1".into());
        }
        if self.rank > self.d_in.min(self.d_out) {
            return fail(format!(
                "rank {} exceeds min(d_in, d_out) = {}",
                self.rank,
                self.d_in.min(self.d_out)
            ));
        }
        if !self.alpha_init.is_finite() || !self.init_scale.is_finite() {
            return fail("alpha_init and init_scale must be finite".into());
        }
        Ok(())
    }

    /// Number of parameters the adapter adds on top of the frozen layer:
    /// the routing matrix, the scalar, and every expert factor pair.
    pub fn num_trainable_params(&self) -> usize {
        self.num_experts * self.d_in
            + 1
            + self.num_experts * self.rank * (self.d_in + self.d_out)
    }
}

/// One low-rank expert: `w_in` is `rank x d_in`, `w_out` is `d_out x rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w_in: Matrix,
    pub w_out: Matrix,
}

/// Soft-routing weights for one token batch.
#[derive(Debug, Clone)]
pub struct RoutingWeights {
    /// Dispatcher, `E x N`; every row sums to 1.
    pub dispatch: Matrix,
    /// Combiner, `E x N`; every column sums to 1.
    pub combine: Matrix,
}

/// A SMoLA block bound to one frozen base layer.
#[derive(Debug, Clone)]
pub struct SmolaBlock {
    pub config: SmolaConfig,
    /// Routing matrix, `E x d_in`.
    pub phi: Matrix,
    /// Learnable routing temperature.
    pub alpha: f64,
    pub experts: Vec<Expert>,
    /// Frozen layer weights, `d_in x d_out`. Never mutated by training.
    pub base: Arc<Matrix>,
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Matrix,
    x_normalized: Matrix,
    x_norms: Vec<f64>,
    phi_normalized: Matrix,
    phi_norms: Vec<f64>,
    /// `norm(Phi) * norm(X)^T` before the alpha scale.
    similarity: Matrix,
    dispatch: Matrix,
    combine: Matrix,
    /// `D X`, `E x d_in`.
    dispatched: Matrix,
    /// Per-expert mid activations `w_in * dispatched_i`, length `rank` each.
    expert_mid: Vec<Vec<f64>>,
    /// Stacked expert outputs, `E x d_out` (row `i` is `y_i^T`).
    expert_out: Matrix,
}

impl ForwardCache {
    pub fn n_tokens(&self) -> usize {
        self.x.rows()
    }

    pub fn routing(&self) -> RoutingWeights {
        RoutingWeights {
            dispatch: self.dispatch.clone(),
            combine: self.combine.clone(),
        }
    }
}

/// Gradients of a scalar loss with respect to every trainable parameter of a
/// block plus its input. The frozen base receives no gradient.
#[derive(Debug, Clone)]
pub struct SmolaGradients {
    pub d_phi: Matrix,
    pub d_alpha: f64,
    pub d_experts: Vec<Expert>,
    pub d_input: Matrix,
}

impl SmolaGradients {
    pub fn zeros_like(block: &SmolaBlock, n_tokens: usize) -> Self {
        Self {
            d_phi: Matrix::zeros(block.phi.rows(), block.phi.cols()),
            d_alpha: 0.0,
            d_experts: block
                .experts
                .iter()
                .map(|e| Expert {
                    w_in: Matrix::zeros(e.w_in.rows(), e.w_in.cols()),
                    w_out: Matrix::zeros(e.w_out.rows(), e.w_out.cols()),
                })
                .collect(),
            d_input: Matrix::zeros(n_tokens, block.config.d_in),
        }
    }
}

/// Multiply-add tallies for one forward pass, broken down by stage. Counts
/// are incremented inside the matmul kernels, one per fused multiply-add
/// actually executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MaddBreakdown {
    pub backbone: u64,
    pub routing: u64,
    pub dispatch: u64,
    pub expert: u64,
    pub combine: u64,
}

impl MaddBreakdown {
    pub fn extra(&self) -> u64 {
        self.routing + self.dispatch + self.expert + self.combine
    }

    pub fn total(&self) -> u64 {
        self.backbone + self.extra()
    }
}

impl SmolaBlock {
    /// Builds a block from a config and a frozen base layer. Every `w_out`
    /// starts at exactly zero so the block initially preserves the backbone;
    /// `w_in` rows are Gaussian with standard deviation `init_scale/sqrt(d_in)`
    /// and `phi` Gaussian with standard deviation `1/sqrt(d_in)`.
    pub fn init(config: SmolaConfig, base: Arc<Matrix>) -> Result<Self> {
        config.validate()?;
        if base.shape() != (config.d_in, config.d_out) {
            return Err(SmolaError::ShapeMismatch {
                context: "SmolaBlock::init base",
                left: (config.d_in, config.d_out),
                right: base.shape(),
            });
        }
        let mut rng = Rng::new(config.seed);
        let phi_std = 1.0 / (config.d_in as f64).sqrt();
        let phi = Matrix::from_fn(config.num_experts, config.d_in, |_, _| {
            rng.next_gaussian() * phi_std
        });
        let w_in_std = config.init_scale / (config.d_in as f64).sqrt();
        let experts = (0..config.num_experts)
            .map(|_| Expert {
                w_in: Matrix::from_fn(config.rank, config.d_in, |_, _| {
                    rng.next_gaussian() * w_in_std
                }),
                w_out: Matrix::zeros(config.d_out, config.rank),
            })
            .collect();
        Ok(Self {
            alpha: config.alpha_init,
            phi,
            experts,
            base,
            config,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.config.num_experts
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() == 0 {
            return Err(SmolaError::EmptyInput {
                context: "SmolaBlock: zero-token batch",
            });
        }
        if x.cols() != self.config.d_in {
            return Err(SmolaError::ShapeMismatch {
                context: "SmolaBlock input",
                left: (x.rows(), x.cols()),
                right: (x.rows(), self.config.d_in),
            });
        }
        Ok(())
    }

    /// Dispatcher and combiner for a token batch: softmax over tokens per
    /// expert row and softmax over experts per token column of the scaled
    /// cosine-similarity logits.
    pub fn compute_routing(&self, x: &Matrix) -> Result<RoutingWeights> {
        self.check_input(x)?;
        let mut sink = MaddBreakdown::default();
        let (_, _, _, routing) = self.routing_inner(x, &mut sink)?;
        Ok(routing)
    }

    #[allow(clippy::type_complexity)]
    fn routing_inner(
        &self,
        x: &Matrix,
        tally: &mut MaddBreakdown,
    ) -> Result<((Matrix, Vec<f64>), (Matrix, Vec<f64>), Matrix, RoutingWeights)> {
        let x_norms: Vec<f64> = (0..x.rows())
            .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let x_normalized = x.l2_normalize_rows(NORM_EPSILON);
        let phi_norms: Vec<f64> = (0..self.phi.rows())
            .map(|r| self.phi.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let phi_normalized = self.phi.l2_normalize_rows(NORM_EPSILON);

        let similarity =
            phi_normalized.matmul_counting(&x_normalized.transpose(), &mut tally.routing)?;
        let logits = similarity.scale(self.alpha);
        let dispatch = logits.softmax(Axis::OverCols);
        let combine = logits.softmax(Axis::OverRows);
        Ok((
            (x_normalized, x_norms),
            (phi_normalized, phi_norms),
            similarity,
            RoutingWeights { dispatch, combine },
        ))
    }

    /// Output of expert `i` for the routed batch: the dispatched input slice
    /// pushed through the expert's factor pair, returned as a `d_out x 1`
    /// column.
    pub fn expert_apply(&self, i: usize, routing: &RoutingWeights, x: &Matrix) -> Result<Matrix> {
        if i >= self.experts.len() {
            return Err(SmolaError::IndexOutOfRange {
                context: "expert_apply",
                index: i,
                len: self.experts.len(),
            });
        }
        self.check_input(x)?;
        let d_row = Matrix::from_vec(1, x.rows(), routing.dispatch.row(i).to_vec())?;
        let dispatched = d_row.matmul(x)?; // 1 x d_in
        let expert = &self.experts[i];
        let mid = expert.w_in.matmul(&dispatched.transpose())?; // rank x 1
        expert.w_out.matmul(&mid) // d_out x 1
    }

    /// Full forward pass: `Y = X W* + C^T [y_0 ... y_{E-1}]`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let mut sink = MaddBreakdown::default();
        self.forward_with_tally(x, &mut sink)
    }

    /// Forward pass that also reports how many multiply-adds each stage
    /// executed.
    pub fn forward_counted(&self, x: &Matrix) -> Result<(Matrix, ForwardCache, MaddBreakdown)> {
        let mut tally = MaddBreakdown::default();
        let (y, cache) = self.forward_with_tally(x, &mut tally)?;
        Ok((y, cache, tally))
    }

    pub(crate) fn forward_with_tally(
        &self,
        x: &Matrix,
        tally: &mut MaddBreakdown,
    ) -> Result<(Matrix, ForwardCache)> {
        let backbone = x.matmul_counting(&self.base, &mut tally.backbone)?;
        let (correction, cache) = self.correction_with_tally(x, tally)?;
        let y = backbone.add(&correction)?;
        Ok((y, cache))
    }

    /// Expert correction term only (everything except `X W*`).
    pub fn correction(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let mut sink = MaddBreakdown::default();
        self.correction_with_tally(x, &mut sink)
    }

    pub(crate) fn correction_with_tally(
        &self,
        x: &Matrix,
        tally: &mut MaddBreakdown,
    ) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let ((x_normalized, x_norms), (phi_normalized, phi_norms), similarity, routing) =
            self.routing_inner(x, tally)?;
        let dispatched = routing.dispatch.matmul_counting(x, &mut tally.dispatch)?;

        let rank = self.config.rank;
        let mut expert_mid = Vec::with_capacity(self.experts.len());
        let mut expert_out = Matrix::zeros(self.experts.len(), self.config.d_out);
        for (i, expert) in self.experts.iter().enumerate() {
            let slice = Matrix::from_vec(self.config.d_in, 1, dispatched.row(i).to_vec())?;
            let mid = expert.w_in.matmul_counting(&slice, &mut tally.expert)?; // rank x 1
            let out = expert.w_out.matmul_counting(&mid, &mut tally.expert)?; // d_out x 1
            expert_mid.push((0..rank).map(|j| mid.get(j, 0)).collect());
            for j in 0..self.config.d_out {
                expert_out.set(i, j, out.get(j, 0));
            }
        }

        let correction = routing
            .combine
            .transpose()
            .matmul_counting(&expert_out, &mut tally.combine)?;

        let cache = ForwardCache {
            x: x.clone(),
            x_normalized,
            x_norms,
            phi_normalized,
            phi_norms,
            similarity,
            dispatch: routing.dispatch,
            combine: routing.combine,
            dispatched,
            expert_mid,
            expert_out,
        };
        Ok((correction, cache))
    }

    /// Exact analytic gradients of `sum(upstream . Y)` for the full forward
    /// pass, including the backbone contribution to the input gradient.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<SmolaGradients> {
        let mut grads = self.correction_backward(cache, upstream)?;
        let backbone_dx = upstream.matmul(&self.base.transpose())?;
        grads.d_input.add_assign(&backbone_dx)?;
        Ok(grads)
    }

    /// Gradients of `sum(upstream . correction)`: the expert/routing path
    /// only, without the `X W*` term.
    pub fn correction_backward(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
    ) -> Result<SmolaGradients> {
        let n = cache.x.rows();
        let e_count = self.experts.len();
        let (d_in, d_out) = (self.config.d_in, self.config.d_out);
        if upstream.shape() != (n, d_out) {
            return Err(SmolaError::ShapeMismatch {
                context: "backward upstream",
                left: (n, d_out),
                right: upstream.shape(),
            });
        }

        // correction = C^T * expert_out
        let d_expert_out = cache.combine.matmul(upstream)?; // E x d_out
        let d_combine = cache.expert_out.matmul(&upstream.transpose())?; // E x N

        // Per-expert factor pair, mid activation, and dispatched slice.
        let mut d_experts = Vec::with_capacity(e_count);
        let mut d_dispatched = Matrix::zeros(e_count, d_in);
        for (i, expert) in self.experts.iter().enumerate() {
            let d_y = Matrix::from_vec(d_out, 1, d_expert_out.row(i).to_vec())?;
            let mid = Matrix::from_vec(self.config.rank, 1, cache.expert_mid[i].clone())?;
            let d_w_out = d_y.matmul(&mid.transpose())?; // d_out x rank
            let d_mid = expert.w_out.transpose().matmul(&d_y)?; // rank x 1
            let slice = Matrix::from_vec(1, d_in, cache.dispatched.row(i).to_vec())?;
            let d_w_in = d_mid.matmul(&slice)?; // rank x d_in
            let d_slice = expert.w_in.transpose().matmul(&d_mid)?; // d_in x 1
            for k in 0..d_in {
                d_dispatched.set(i, k, d_slice.get(k, 0));
            }
            d_experts.push(Expert {
                w_in: d_w_in,
                w_out: d_w_out,
            });
        }

        // dispatched = D * X
        let d_dispatch = d_dispatched.matmul(&cache.x.transpose())?; // E x N
        let mut d_input = cache.dispatch.transpose().matmul(&d_dispatched)?; // N x d_in

        // Softmax backward. D is a softmax within each row, C within each
        // column of the same logits; their pullbacks add.
        let mut d_logits = Matrix::zeros(e_count, n);
        for e in 0..e_count {
            let mut row_dot = 0.0;
            for t in 0..n {
                row_dot += d_dispatch.get(e, t) * cache.dispatch.get(e, t);
            }
            for t in 0..n {
                let v = cache.dispatch.get(e, t) * (d_dispatch.get(e, t) - row_dot);
                d_logits.set(e, t, v);
            }
        }
        for t in 0..n {
            let mut col_dot = 0.0;
            for e in 0..e_count {
                col_dot += d_combine.get(e, t) * cache.combine.get(e, t);
            }
            for e in 0..e_count {
                let v = cache.combine.get(e, t) * (d_combine.get(e, t) - col_dot);
                d_logits.set(e, t, d_logits.get(e, t) + v);
            }
        }

        // logits = alpha * similarity, similarity = norm(Phi) norm(X)^T.
        let mut d_alpha = 0.0;
        for (dl, s) in d_logits.data().iter().zip(cache.similarity.data().iter()) {
            d_alpha += dl * s;
        }
        let d_phi_normalized = d_logits.matmul(&cache.x_normalized)?.scale(self.alpha);
        let d_x_normalized = d_logits
            .transpose()
            .matmul(&cache.phi_normalized)?
            .scale(self.alpha);

        let d_phi = normalize_rows_backward(&d_phi_normalized, &cache.phi_normalized, &cache.phi_norms);
        let d_x_from_norm =
            normalize_rows_backward(&d_x_normalized, &cache.x_normalized, &cache.x_norms);
        d_input.add_assign(&d_x_from_norm)?;

        Ok(SmolaGradients {
            d_phi,
            d_alpha,
            d_experts,
            d_input,
        })
    }
}

/// Pullback of per-row l2 normalization `p = v / max(|v|, eps)` given the
/// normalized rows and the raw norms.
fn normalize_rows_backward(d_normalized: &Matrix, normalized: &Matrix, norms: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(d_normalized.rows(), d_normalized.cols());
    for r in 0..d_normalized.rows() {
        let raw = norms[r];
        if raw > NORM_EPSILON {
            let mut dot = 0.0;
            for c in 0..d_normalized.cols() {
                dot += d_normalized.get(r, c) * normalized.get(r, c);
            }
            for c in 0..d_normalized.cols() {
                let v = (d_normalized.get(r, c) - dot * normalized.get(r, c)) / raw;
                out.set(r, c, v);
            }
        } else {
            // Below the guard the denominator is the constant epsilon.
            for c in 0..d_normalized.cols() {
                out.set(r, c, d_normalized.get(r, c) / NORM_EPSILON);
            }
        }
    }
    out
}
