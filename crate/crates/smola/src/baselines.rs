//! Reference adapters: plain LoRA on a frozen layer, a sparse top-1 gated
//! MoE feed-forward, and a per-token weighted mixture of LoRA experts.

use std::sync::Arc;

use crate::error::{Result, SmolaError};
use crate::numkit::{gelu, gelu_derivative, Axis, Matrix, NORM_EPSILON};

/// One low-rank adapter over a frozen layer: `Y = X W + (X W_in^T) W_out^T`,
/// always computed in factored order.
#[derive(Debug, Clone)]
pub struct PlainLora {
    /// `rank x d_in`.
    pub w_in: Matrix,
    /// `d_out x rank`.
    pub w_out: Matrix,
    /// Frozen `d_in x d_out` layer.
    pub base: Arc<Matrix>,
}

impl PlainLora {
    pub fn new(w_in: Matrix, w_out: Matrix, base: Arc<Matrix>) -> Result<Self> {
        if w_in.cols() != base.rows() || w_out.rows() != base.cols() || w_in.rows() != w_out.cols()
        {
            return Err(SmolaError::ShapeMismatch {
                context: "PlainLora factors",
                left: (w_in.rows(), w_in.cols()),
                right: (w_out.rows(), w_out.cols()),
            });
        }
        Ok(Self { w_in, w_out, base })
    }

    pub fn rank(&self) -> usize {
        self.w_in.rows()
    }

    pub fn num_trainable_params(&self) -> usize {
        self.w_in.data().len() + self.w_out.data().len()
    }

    /// Factored application; the effective weight `W + W_out W_in` is never
    /// materialized.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.base.rows() {
            return Err(SmolaError::ShapeMismatch {
                context: "lora_apply input",
                left: (x.rows(), x.cols()),
                right: self.base.shape(),
            });
        }
        let mut y = x.matmul(&self.base)?;
        let mid = x.matmul(&self.w_in.transpose())?; // N x rank
        let corr = mid.matmul(&self.w_out.transpose())?; // N x d_out
        y.add_assign(&corr)?;
        Ok(y)
    }

    /// Gradients of `sum(upstream . apply(x))` for both factors.
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
        let mid = x.matmul(&self.w_in.transpose())?; // N x rank
        let d_w_out = upstream.transpose().matmul(&mid)?; // d_out x rank
        let d_mid = upstream.matmul(&self.w_out)?; // N x rank
        let d_w_in = d_mid.transpose().matmul(x)?; // rank x d_in
        Ok((d_w_in, d_w_out))
    }
}

/// Sparse-gated mixture of feed-forward experts. Each expert is
/// `w_out . GeLU(w_in . x)` mapping `d_model` back to `d_model`; the gate
/// scores l2-normalized tokens.
#[derive(Debug, Clone)]
pub struct GatedMoeFfn {
    /// Pairs `(w_in: d_hidden x d_model, w_out: d_model x d_hidden)`.
    pub experts: Vec<(Matrix, Matrix)>,
    /// `num_experts x d_model`.
    pub gate: Matrix,
}

/// Per-expert usage counters from one gated forward pass.
#[derive(Debug, Clone, Default)]
pub struct ExpertAccessStats {
    /// How many tokens evaluated each expert.
    pub tokens_per_expert: Vec<usize>,
}

impl GatedMoeFfn {
    pub fn new(experts: Vec<(Matrix, Matrix)>, gate: Matrix) -> Result<Self> {
        if experts.is_empty() {
            return Err(SmolaError::EmptyInput {
                context: "GatedMoeFfn experts",
            });
        }
        let d_model = experts[0].0.cols();
        let d_hidden = experts[0].0.rows();
        for (w_in, w_out) in &experts {
            if w_in.shape() != (d_hidden, d_model) || w_out.shape() != (d_model, d_hidden) {
                return Err(SmolaError::ShapeMismatch {
                    context: "GatedMoeFfn expert",
                    left: w_in.shape(),
                    right: w_out.shape(),
                });
            }
        }
        if gate.shape() != (experts.len(), d_model) {
            return Err(SmolaError::ShapeMismatch {
                context: "GatedMoeFfn gate",
                left: (experts.len(), d_model),
                right: gate.shape(),
            });
        }
        Ok(Self { experts, gate })
    }

    pub fn d_model(&self) -> usize {
        self.experts[0].0.cols()
    }

    pub fn num_trainable_params(&self) -> usize {
        self.gate.data().len()
            + self
                .experts
                .iter()
                .map(|(a, b)| a.data().len() + b.data().len())
                .sum::<usize>()
    }

    /// Per-token gate probabilities: softmax over `gate . normalize(x_s)`.
    /// With `top1`, the distribution collapses to a one-hot at the argmax
    /// (ties break to the lowest expert index), preserving the unit sum.
    pub fn gate_probabilities(&self, x: &Matrix, top1: bool) -> Result<Matrix> {
        if x.cols() != self.d_model() {
            return Err(SmolaError::ShapeMismatch {
                context: "gated_moe gate input",
                left: (x.rows(), x.cols()),
                right: self.gate.shape(),
            });
        }
        let x_norm = x.l2_normalize_rows(NORM_EPSILON);
        let logits = self.gate.matmul(&x_norm.transpose())?; // E x N
        let mut probs = logits.softmax(Axis::OverRows);
        if top1 {
            for t in 0..probs.cols() {
                let mut best = 0;
                for e in 1..probs.rows() {
                    if probs.get(e, t) > probs.get(best, t) {
                        best = e;
                    }
                }
                for e in 0..probs.rows() {
                    probs.set(e, t, if e == best { 1.0 } else { 0.0 });
                }
            }
        }
        Ok(probs)
    }

    /// `h(x_s) = sum_i G(x_s)_i w_i_out . GeLU(w_i_in . x_s)` per token.
    pub fn forward(&self, x: &Matrix, top1: bool) -> Result<Matrix> {
        Ok(self.forward_with_stats(x, top1)?.0)
    }

    /// Forward pass that also counts which experts were actually evaluated.
    /// Zero-weight experts are skipped, so with `top1` exactly one expert is
    /// touched per token.
    pub fn forward_with_stats(&self, x: &Matrix, top1: bool) -> Result<(Matrix, ExpertAccessStats)> {
        let probs = self.gate_probabilities(x, top1)?;
        let n = x.rows();
        let d_model = self.d_model();
        let mut out = Matrix::zeros(n, d_model);
        let mut stats = ExpertAccessStats {
            tokens_per_expert: vec![0; self.experts.len()],
        };
        for t in 0..n {
            let token = Matrix::from_vec(d_model, 1, x.row(t).to_vec())?;
            for (e, (w_in, w_out)) in self.experts.iter().enumerate() {
                let weight = probs.get(e, t);
                if weight == 0.0 {
                    continue;
                }
                stats.tokens_per_expert[e] += 1;
                let hidden = w_in.matmul(&token)?.map(gelu);
                let value = w_out.matmul(&hidden)?;
                for c in 0..d_model {
                    out.set(t, c, out.get(t, c) + weight * value.get(c, 0));
                }
            }
        }
        Ok((out, stats))
    }

    /// Gradients of `sum(upstream . forward(x, top1=false))` with soft
    /// gating, for the gate and every expert pair.
    #[allow(clippy::type_complexity)]
    pub fn backward(
        &self,
        x: &Matrix,
        upstream: &Matrix,
    ) -> Result<(Matrix, Vec<(Matrix, Matrix)>)> {
        let n = x.rows();
        let d_model = self.d_model();
        let e_cnt = self.experts.len();
        let probs = self.gate_probabilities(x, false)?;
        let x_norm = x.l2_normalize_rows(NORM_EPSILON);

        let mut d_gate = Matrix::zeros(e_cnt, d_model);
        let mut d_experts: Vec<(Matrix, Matrix)> = self
            .experts
            .iter()
            .map(|(a, b)| (Matrix::zeros(a.rows(), a.cols()), Matrix::zeros(b.rows(), b.cols())))
            .collect();

        for t in 0..n {
            let token = Matrix::from_vec(d_model, 1, x.row(t).to_vec())?;
            let g_row = Matrix::from_vec(d_model, 1, upstream.row(t).to_vec())?;
            let mut d_logits = vec![0.0; e_cnt];
            let mut gate_dot = 0.0;
            let mut values = Vec::with_capacity(e_cnt);
            for (e, (w_in, w_out)) in self.experts.iter().enumerate() {
                let pre = w_in.matmul(&token)?; // d_hidden x 1
                let hidden = pre.map(gelu);
                let value = w_out.matmul(&hidden)?; // d_model x 1
                values.push((pre, hidden, value));

                let weight = probs.get(e, t);
                // Expert path.
                let d_value = g_row.scale(weight);
                let (d_w_in, d_w_out) = &mut d_experts[e];
                let d_hidden = self.experts[e].1.transpose().matmul(&d_value)?;
                let d_pre = Matrix::from_fn(d_hidden.rows(), 1, |r, _| {
                    d_hidden.get(r, 0) * gelu_derivative(values[e].0.get(r, 0))
                });
                d_w_out.add_assign(&d_value.matmul(&values[e].1.transpose())?)?;
                d_w_in.add_assign(&d_pre.matmul(&token.transpose())?)?;
                // Gate path: dG_e = upstream . value_e.
                let mut dv = 0.0;
                for c in 0..d_model {
                    dv += upstream.get(t, c) * values[e].2.get(c, 0);
                }
                d_logits[e] = dv;
                gate_dot += dv * weight;
            }
            // Softmax pullback within the token column, then outer product
            // with the normalized token.
            for (e, dl) in d_logits.iter().enumerate() {
                let pull = probs.get(e, t) * (dl - gate_dot);
                for c in 0..d_model {
                    d_gate.set(e, c, d_gate.get(e, c) + pull * x_norm.get(t, c));
                }
            }
        }
        Ok((d_gate, d_experts))
    }
}

/// Weighted sum of LoRA expert corrections over one frozen layer. Mixing
/// weights are supplied per token and must form a probability vector.
#[derive(Debug, Clone)]
pub struct LoraMixture {
    /// Pairs `(w_in: rank x d_in, w_out: d_out x rank)`.
    pub experts: Vec<(Matrix, Matrix)>,
    pub base: Arc<Matrix>,
}

impl LoraMixture {
    pub fn new(experts: Vec<(Matrix, Matrix)>, base: Arc<Matrix>) -> Result<Self> {
        if experts.is_empty() {
            return Err(SmolaError::EmptyInput {
                context: "LoraMixture experts",
            });
        }
        for (w_in, w_out) in &experts {
            if w_in.cols() != base.rows() || w_out.rows() != base.cols() {
                return Err(SmolaError::ShapeMismatch {
                    context: "LoraMixture expert",
                    left: w_in.shape(),
                    right: w_out.shape(),
                });
            }
        }
        Ok(Self { experts, base })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn num_trainable_params(&self) -> usize {
        self.experts
            .iter()
            .map(|(a, b)| a.data().len() + b.data().len())
            .sum()
    }

    fn check_weights(&self, x: &Matrix, weights: &Matrix) -> Result<()> {
        if weights.shape() != (x.rows(), self.experts.len()) {
            return Err(SmolaError::ShapeMismatch {
                context: "lora_mixture weights",
                left: (x.rows(), self.experts.len()),
                right: weights.shape(),
            });
        }
        for t in 0..weights.rows() {
            let sum: f64 = weights.row(t).iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(SmolaError::WeightsNotNormalized { token: t, sum });
            }
        }
        Ok(())
    }

    /// `Y = X W + sum_i weight_i(token) * (X W_i_in^T) W_i_out^T`.
    pub fn forward(&self, x: &Matrix, weights: &Matrix) -> Result<Matrix> {
        self.check_weights(x, weights)?;
        let mut y = x.matmul(&self.base)?;
        for (i, (w_in, w_out)) in self.experts.iter().enumerate() {
            let corr = x.matmul(&w_in.transpose())?.matmul(&w_out.transpose())?;
            for t in 0..x.rows() {
                let w = weights.get(t, i);
                for c in 0..y.cols() {
                    y.set(t, c, y.get(t, c) + w * corr.get(t, c));
                }
            }
        }
        Ok(y)
    }

    /// Gradients of `sum(upstream . forward)` for every expert pair, holding
    /// the mixing weights fixed.
    #[allow(clippy::type_complexity)]
    pub fn backward(
        &self,
        x: &Matrix,
        weights: &Matrix,
        upstream: &Matrix,
    ) -> Result<Vec<(Matrix, Matrix)>> {
        self.check_weights(x, weights)?;
        let mut grads = Vec::with_capacity(self.experts.len());
        for (i, (w_in, w_out)) in self.experts.iter().enumerate() {
            // Weighted upstream for this expert: rows scaled by weight_i.
            let weighted = Matrix::from_fn(upstream.rows(), upstream.cols(), |t, c| {
                upstream.get(t, c) * weights.get(t, i)
            });
            let mid = x.matmul(&w_in.transpose())?; // N x rank
            let d_w_out = weighted.transpose().matmul(&mid)?;
            let d_mid = weighted.matmul(w_out)?;
            let d_w_in = d_mid.transpose().matmul(x)?;
            grads.push((d_w_in, d_w_out));
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{derive_seed, Rng};

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.next_gaussian())
    }

    fn random_lora(seed: u64, rank: usize, d_in: usize, d_out: usize) -> PlainLora {
        let mut rng = Rng::new(seed);
        let base = Arc::new(random_matrix(&mut rng, d_in, d_out));
        PlainLora::new(
            random_matrix(&mut rng, rank, d_in),
            random_matrix(&mut rng, d_out, rank),
            base,
        )
        .unwrap()
    }

    #[test]
    fn lora_zero_w_out_is_plain_layer() {
        let mut lora = random_lora(1, 2, 4, 3);
        lora.w_out = Matrix::zeros(3, 2);
        let mut rng = Rng::new(2);
        let x = random_matrix(&mut rng, 5, 4);
        let y = lora.apply(&x).unwrap();
        let plain = x.matmul(&lora.base).unwrap();
        assert_eq!(y, plain);
    }

    #[test]
    fn lora_identity_factors_add_input() {
        let mut rng = Rng::new(3);
        let base = Arc::new(random_matrix(&mut rng, 3, 3));
        let lora = PlainLora::new(Matrix::identity(3), Matrix::identity(3), base.clone()).unwrap();
        let x = random_matrix(&mut rng, 4, 3);
        let y = lora.apply(&x).unwrap();
        let want = x.matmul(&base).unwrap().add(&x).unwrap();
        let diff = y.sub(&want).unwrap().frobenius_norm();
        assert!(diff < 1e-12);
    }

    #[test]
    fn lora_factored_equals_materialized() {
        for seed in 0..20 {
            let lora = random_lora(derive_seed(100, seed), 2, 5, 4);
            let mut rng = Rng::new(derive_seed(101, seed));
            let x = random_matrix(&mut rng, 6, 5);
            let factored = lora.apply(&x).unwrap();
            // Materialize W' = W + W_out W_in and compare.
            let w_prime = lora
                .base
                .add(&lora.w_out.matmul(&lora.w_in).unwrap().transpose())
                .unwrap();
            let materialized = x.matmul(&w_prime).unwrap();
            let diff = factored.sub(&materialized).unwrap().frobenius_norm();
            let scale = materialized.frobenius_norm().max(1.0);
            assert!(diff / scale < 1e-12, "seed {seed}: rel diff {}", diff / scale);
        }
    }

    #[test]
    fn lora_effective_update_has_bounded_rank() {
        let lora = random_lora(7, 2, 6, 5);
        let delta = lora.w_out.matmul(&lora.w_in).unwrap().transpose(); // d_in x d_out
        let svd = crate::numkit::jacobi_svd(&delta).unwrap();
        let sigma_max = svd.singular_values[0];
        let above: usize = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-10 * sigma_max)
            .count();
        assert!(above <= 2, "rank(W' - W) must be at most the lora rank");
    }

    #[test]
    fn lora_backward_matches_finite_differences() {
        let lora = random_lora(11, 2, 4, 3);
        let mut rng = Rng::new(12);
        let x = random_matrix(&mut rng, 5, 4);
        let upstream = random_matrix(&mut rng, 5, 3);
        let (d_w_in, d_w_out) = lora.backward(&x, &upstream).unwrap();
        let loss = |l: &PlainLora| -> f64 {
            let y = l.apply(&x).unwrap();
            y.data().iter().zip(upstream.data().iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for idx in 0..lora.w_in.data().len() {
            let mut plus = lora.clone();
            plus.w_in.data_mut()[idx] += h;
            let mut minus = lora.clone();
            minus.w_in.data_mut()[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((d_w_in.data()[idx] - fd).abs() < 1e-7);
        }
        for idx in 0..lora.w_out.data().len() {
            let mut plus = lora.clone();
            plus.w_out.data_mut()[idx] += h;
            let mut minus = lora.clone();
            minus.w_out.data_mut()[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((d_w_out.data()[idx] - fd).abs() < 1e-7);
        }
    }

    fn random_moe(seed: u64, experts: usize, d_model: usize, d_hidden: usize) -> GatedMoeFfn {
        let mut rng = Rng::new(seed);
        let pairs = (0..experts)
            .map(|_| {
                (
                    random_matrix(&mut rng, d_hidden, d_model),
                    random_matrix(&mut rng, d_model, d_hidden),
                )
            })
            .collect();
        let gate = random_matrix(&mut rng, experts, d_model);
        GatedMoeFfn::new(pairs, gate).unwrap()
    }

    #[test]
    fn single_expert_reverts_to_dense_ffn() {
        let moe = random_moe(21, 1, 4, 6);
        let mut rng = Rng::new(22);
        let x = random_matrix(&mut rng, 5, 4);
        let y = moe.forward(&x, false).unwrap();
        // Dense FFN applied per token.
        for t in 0..5 {
            let token = Matrix::from_vec(4, 1, x.row(t).to_vec()).unwrap();
            let hidden = moe.experts[0].0.matmul(&token).unwrap().map(gelu);
            let want = moe.experts[0].1.matmul(&hidden).unwrap();
            for c in 0..4 {
                assert!((y.get(t, c) - want.get(c, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top1_with_dominant_logit_selects_that_expert() {
        let mut moe = random_moe(23, 3, 4, 5);
        // Make expert 2's gate row dominate every token.
        moe.gate = Matrix::from_fn(3, 4, |e, _| if e == 2 { 50.0 } else { 0.0 });
        let mut rng = Rng::new(24);
        let x = random_matrix(&mut rng, 4, 4).map(|v| v + 3.0); // positive tokens
        let (y, stats) = moe.forward_with_stats(&x, true).unwrap();
        assert_eq!(stats.tokens_per_expert, vec![0, 0, 4]);
        // Output equals expert 2's FFN alone.
        for t in 0..4 {
            let token = Matrix::from_vec(4, 1, x.row(t).to_vec()).unwrap();
            let hidden = moe.experts[2].0.matmul(&token).unwrap().map(gelu);
            let want = moe.experts[2].1.matmul(&hidden).unwrap();
            for c in 0..4 {
                assert!((y.get(t, c) - want.get(c, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top1_touches_exactly_one_expert_per_token() {
        let moe = random_moe(25, 4, 5, 6);
        let mut rng = Rng::new(26);
        let x = random_matrix(&mut rng, 9, 5);
        let (_, stats) = moe.forward_with_stats(&x, true).unwrap();
        let total: usize = stats.tokens_per_expert.iter().sum();
        assert_eq!(total, 9);
    }

    #[test]
    fn top1_tie_breaks_to_lowest_index() {
        // Zero gate makes every logit equal; argmax must pick expert 0.
        let mut moe = random_moe(27, 3, 4, 5);
        moe.gate = Matrix::zeros(3, 4);
        let mut rng = Rng::new(28);
        let x = random_matrix(&mut rng, 6, 4);
        let (_, stats) = moe.forward_with_stats(&x, true).unwrap();
        assert_eq!(stats.tokens_per_expert, vec![6, 0, 0]);
    }

    #[test]
    fn soft_gating_matches_per_token_scalar_oracle() {
        let moe = random_moe(29, 3, 3, 4);
        let mut rng = Rng::new(30);
        let x = random_matrix(&mut rng, 4, 3);
        let y = moe.forward(&x, false).unwrap();

        for t in 0..4 {
            // Scalar recomputation of gate and experts for this token.
            let row = x.row(t);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let xn: Vec<f64> = row.iter().map(|v| v / norm).collect();
            let mut logits = vec![0.0; 3];
            for (e, l) in logits.iter_mut().enumerate() {
                for k in 0..3 {
                    *l += moe.gate.get(e, k) * xn[k];
                }
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
            let zs: f64 = z.iter().sum();
            let probs: Vec<f64> = z.iter().map(|v| v / zs).collect();

            for c in 0..3 {
                let mut want = 0.0;
                for e in 0..3 {
                    let (w_in, w_out) = &moe.experts[e];
                    let mut value_c = 0.0;
                    for h in 0..w_in.rows() {
                        let mut pre = 0.0;
                        for k in 0..3 {
                            pre += w_in.get(h, k) * row[k];
                        }
                        value_c += w_out.get(c, h) * gelu(pre);
                    }
                    want += probs[e] * value_c;
                }
                assert!(
                    (y.get(t, c) - want).abs() < 1e-12,
                    "token {t} col {c}: {} vs {want}",
                    y.get(t, c)
                );
            }
        }
    }

    #[test]
    fn gate_argmax_invariant_under_token_scaling() {
        let moe = random_moe(31, 4, 5, 6);
        let mut rng = Rng::new(32);
        let x = random_matrix(&mut rng, 8, 5);
        let probs = moe.gate_probabilities(&x, false).unwrap();
        let scaled = Matrix::from_fn(8, 5, |t, c| x.get(t, c) * (1.0 + t as f64 * 10.0));
        let probs_scaled = moe.gate_probabilities(&scaled, false).unwrap();
        for t in 0..8 {
            let argmax = |p: &Matrix| {
                let mut best = 0;
                for e in 1..4 {
                    if p.get(e, t) > p.get(best, t) {
                        best = e;
                    }
                }
                best
            };
            assert_eq!(argmax(&probs), argmax(&probs_scaled));
        }
    }

    #[test]
    fn gated_moe_backward_matches_finite_differences() {
        let moe = random_moe(33, 2, 3, 4);
        let mut rng = Rng::new(34);
        let x = random_matrix(&mut rng, 4, 3);
        let upstream = random_matrix(&mut rng, 4, 3);
        let (d_gate, d_experts) = moe.backward(&x, &upstream).unwrap();
        let loss = |m: &GatedMoeFfn| -> f64 {
            let y = m.forward(&x, false).unwrap();
            y.data().iter().zip(upstream.data().iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for idx in 0..moe.gate.data().len() {
            let mut plus = moe.clone();
            plus.gate.data_mut()[idx] += h;
            let mut minus = moe.clone();
            minus.gate.data_mut()[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!(
                (d_gate.data()[idx] - fd).abs() < 1e-6,
                "gate[{idx}]: {} vs {fd}",
                d_gate.data()[idx]
            );
        }
        for e in 0..2 {
            for idx in 0..moe.experts[e].0.data().len() {
                let mut plus = moe.clone();
                plus.experts[e].0.data_mut()[idx] += h;
                let mut minus = moe.clone();
                minus.experts[e].0.data_mut()[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((d_experts[e].0.data()[idx] - fd).abs() < 1e-6);
            }
            for idx in 0..moe.experts[e].1.data().len() {
                let mut plus = moe.clone();
                plus.experts[e].1.data_mut()[idx] += h;
                let mut minus = moe.clone();
                minus.experts[e].1.data_mut()[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((d_experts[e].1.data()[idx] - fd).abs() < 1e-6);
            }
        }
    }

    fn random_mixture(seed: u64, experts: usize, rank: usize, d_in: usize, d_out: usize) -> LoraMixture {
        let mut rng = Rng::new(seed);
        let base = Arc::new(random_matrix(&mut rng, d_in, d_out));
        let pairs = (0..experts)
            .map(|_| {
                (
                    random_matrix(&mut rng, rank, d_in),
                    random_matrix(&mut rng, d_out, rank),
                )
            })
            .collect();
        LoraMixture::new(pairs, base).unwrap()
    }

    #[test]
    fn identical_experts_any_weights_equal_single_lora() {
        let mut mix = random_mixture(41, 3, 2, 4, 3);
        let first = mix.experts[0].clone();
        mix.experts = vec![first.clone(), first.clone(), first.clone()];
        let mut rng = Rng::new(42);
        let x = random_matrix(&mut rng, 5, 4);
        // Arbitrary normalized weights per token.
        let weights = Matrix::from_fn(5, 3, |t, e| match e {
            0 => 0.2 + 0.1 * t as f64 / 10.0,
            1 => 0.3,
            _ => 0.5 - 0.1 * t as f64 / 10.0,
        });
        let y = mix.forward(&x, &weights).unwrap();
        let single = PlainLora::new(first.0, first.1, mix.base.clone()).unwrap();
        let want = single.apply(&x).unwrap();
        let diff = y.sub(&want).unwrap().frobenius_norm();
        assert!(diff < 1e-12);
    }

    #[test]
    fn one_hot_weights_select_that_expert() {
        let mix = random_mixture(43, 3, 2, 4, 3);
        let mut rng = Rng::new(44);
        let x = random_matrix(&mut rng, 4, 4);
        let weights = Matrix::from_fn(4, 3, |_, e| if e == 1 { 1.0 } else { 0.0 });
        let y = mix.forward(&x, &weights).unwrap();
        let single = PlainLora::new(
            mix.experts[1].0.clone(),
            mix.experts[1].1.clone(),
            mix.base.clone(),
        )
        .unwrap();
        let want = single.apply(&x).unwrap();
        let diff = y.sub(&want).unwrap().frobenius_norm();
        assert!(diff < 1e-12);
    }

    #[test]
    fn mixture_matches_per_token_expansion_oracle() {
        let mix = random_mixture(45, 3, 1, 3, 2);
        let mut rng = Rng::new(46);
        let x = random_matrix(&mut rng, 4, 3);
        let raw = Matrix::from_fn(4, 3, |t, e| 0.1 + ((t * 3 + e) % 5) as f64);
        let weights = Matrix::from_fn(4, 3, |t, e| {
            let sum: f64 = raw.row(t).iter().sum();
            raw.get(t, e) / sum
        });
        let y = mix.forward(&x, &weights).unwrap();
        for t in 0..4 {
            for c in 0..2 {
                let mut want = 0.0;
                for k in 0..3 {
                    want += x.get(t, k) * mix.base.get(k, c);
                }
                for e in 0..3 {
                    let (w_in, w_out) = &mix.experts[e];
                    let mut mid = 0.0;
                    for k in 0..3 {
                        mid += x.get(t, k) * w_in.get(0, k);
                    }
                    want += weights.get(t, e) * mid * w_out.get(c, 0);
                }
                assert!((y.get(t, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unnormalized_weights_are_rejected() {
        let mix = random_mixture(47, 2, 1, 3, 2);
        let x = Matrix::from_fn(2, 3, |_, _| 1.0);
        let weights = Matrix::from_fn(2, 2, |_, _| 0.4); // sums to 0.8
        match mix.forward(&x, &weights) {
            Err(SmolaError::WeightsNotNormalized { token, sum }) => {
                assert_eq!(token, 0);
                assert!((sum - 0.8).abs() < 1e-12);
            }
            other => panic!("expected weight error, got {other:?}"),
        }
    }

    #[test]
    fn mixture_backward_matches_finite_differences() {
        let mix = random_mixture(49, 2, 2, 3, 2);
        let mut rng = Rng::new(50);
        let x = random_matrix(&mut rng, 4, 3);
        let weights = Matrix::from_fn(4, 2, |_, e| if e == 0 { 0.3 } else { 0.7 });
        let upstream = random_matrix(&mut rng, 4, 2);
        let grads = mix.backward(&x, &weights, &upstream).unwrap();
        let loss = |m: &LoraMixture| -> f64 {
            let y = m.forward(&x, &weights).unwrap();
            y.data().iter().zip(upstream.data().iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for e in 0..2 {
            for idx in 0..mix.experts[e].0.data().len() {
                let mut plus = mix.clone();
                plus.experts[e].0.data_mut()[idx] += h;
                let mut minus = mix.clone();
                minus.experts[e].0.data_mut()[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((grads[e].0.data()[idx] - fd).abs() < 1e-7);
            }
        }
    }
}
