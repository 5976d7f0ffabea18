//! Desk-scale multitask fine-tuning harness.
//!
//! Synthetic tasks perturb one frozen layer: task `t` draws token batches
//! `X = Z + 1 mu_t^T` and targets `Y = X (W* + DeltaW_t) + noise`, where the
//! `DeltaW_t` are low-rank with mutually orthogonal factors (so no single
//! rank-limited adapter can satisfy every task) and `mu_t` is a per-task
//! signature direction aligned with the task's column space (so routing can
//! tell tasks apart from token content). The loss is the unit-weight sum of
//! per-task mean squared errors. The optimizer is plain gradient descent
//! with momentum over adapter parameters only; the backbone is hash-checked
//! frozen. Every `eval_every` steps the average validation score (negative
//! loss) over regenerated held-out batches selects the best checkpoint.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{GatedMoeFfn, LoraMixture, PlainLora};
use crate::block::{SmolaBlock, SmolaConfig};
use crate::checkpoint;
use crate::error::{Result, SmolaError};
use crate::numkit::{derive_seed, matrix_from_csv, matrix_to_csv, Matrix, Rng};
use crate::omni::{Modality, OmniAdapter, TokenBatch};

/// Shape and statistics of a synthetic mixture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixtureSpec {
    pub num_tasks: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub tokens_per_example: usize,
    /// Rank of each task's hidden perturbation.
    pub task_rank: usize,
    /// Frobenius-scale of each perturbation factor pair.
    pub delta_scale: f64,
    /// Strength of the per-task mean direction added to every token.
    pub signature_scale: f64,
    pub noise_std: f64,
    /// Per-task fraction of visual tokens, cycled when shorter than
    /// `num_tasks`.
    pub modality_profiles: Vec<f64>,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            num_tasks: 3,
            d_in: 64,
            d_out: 64,
            tokens_per_example: 32,
            task_rank: 2,
            delta_scale: 1.0,
            signature_scale: 2.0,
            noise_std: 0.02,
            modality_profiles: vec![0.75, 0.25, 0.5],
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(SmolaError::InvalidConfig { reason });
        if self.num_tasks == 0 {
            return fail("mixture needs at least one task".into());
        }
        if self.tokens_per_example == 0 {
            return fail("tokens_per_example must be at least 1".into());
        }
        if self.num_tasks * self.task_rank > self.d_in.min(self.d_out) {
            return fail(format!(
                "num_tasks * task_rank = {} exceeds min(d_in, d_out) = {}; \
                 orthogonal per-task factors do not fit",
                self.num_tasks * self.task_rank,
                self.d_in.min(self.d_out)
            ));
        }
        if self.noise_std < 0.0 {
            return fail("noise_std must be nonnegative".into());
        }
        Ok(())
    }
}

/// One synthetic task: a hidden low-rank perturbation of the frozen layer
/// plus an input signature.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub task_id: usize,
    /// Hidden ground-truth perturbation `DeltaW_t`, `d_in x d_out`.
    pub target_map: Matrix,
    /// Mean direction added to every token of this task's examples.
    pub signature: Vec<f64>,
    /// Fraction of visual tokens per example.
    pub modality_profile: f64,
    pub noise_std: f64,
}

/// A frozen backbone plus its task set.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub seed: u64,
    pub spec: MixtureSpec,
    pub base: Arc<Matrix>,
    pub tasks: Vec<SyntheticTask>,
}

/// Orthonormalizes the columns of a random Gaussian matrix (modified
/// Gram-Schmidt, two passes).
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..rows).map(|_| rng.next_gaussian()).collect())
        .collect();
    for j in 0..cols {
        for _ in 0..2 {
            for k in 0..j {
                let dot: f64 = columns[j]
                    .iter()
                    .zip(columns[k].iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let ck = columns[k].clone();
                for (v, c) in columns[j].iter_mut().zip(ck.iter()) {
                    *v -= dot * c;
                }
            }
        }
        let norm = columns[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut columns[j] {
            *v /= norm;
        }
    }
    columns
}

/// Builds a mixture: a Gaussian frozen layer and `num_tasks` perturbations
/// with explicit orthogonal low-rank factors, pairwise-disjoint across
/// tasks. Identical `(spec, seed)` pairs rebuild identical mixtures.
pub fn make_mixture(spec: &MixtureSpec, seed: u64) -> Result<Mixture> {
    spec.validate()?;
    let mut rng = Rng::new(derive_seed(seed, 0x317A));
    let base = Arc::new(Matrix::from_fn(spec.d_in, spec.d_out, |_, _| {
        rng.next_gaussian() / (spec.d_in as f64).sqrt()
    }));

    let total_rank = spec.num_tasks * spec.task_rank;
    let in_pool = orthonormal_columns(spec.d_in, total_rank, &mut rng);
    let out_pool = orthonormal_columns(spec.d_out, total_rank, &mut rng);

    let tasks = (0..spec.num_tasks)
        .map(|t| {
            let mut target_map = Matrix::zeros(spec.d_in, spec.d_out);
            for k in 0..spec.task_rank {
                let u = &in_pool[t * spec.task_rank + k];
                let v = &out_pool[t * spec.task_rank + k];
                for i in 0..spec.d_in {
                    for j in 0..spec.d_out {
                        let val = target_map.get(i, j) + spec.delta_scale * u[i] * v[j];
                        target_map.set(i, j, val);
                    }
                }
            }
            let signature: Vec<f64> = in_pool[t * spec.task_rank]
                .iter()
                .map(|v| v * spec.signature_scale)
                .collect();
            let profile_len = spec.modality_profiles.len().max(1);
            let modality_profile = if spec.modality_profiles.is_empty() {
                0.5
            } else {
                spec.modality_profiles[t % profile_len]
            };
            SyntheticTask {
                task_id: t,
                target_map,
                signature,
                modality_profile,
                noise_std: spec.noise_std,
            }
        })
        .collect();

    Ok(Mixture {
        seed,
        spec: spec.clone(),
        base,
        tasks,
    })
}

/// Which stream a batch belongs to; train batches are indexed by step,
/// validation batches by a held-out index.
#[derive(Debug, Clone, Copy)]
pub enum BatchPurpose {
    Train { step: usize },
    Validation { index: usize },
}

impl BatchPurpose {
    fn tags(self) -> (u64, u64) {
        match self {
            BatchPurpose::Train { step } => (0x7121, step as u64),
            BatchPurpose::Validation { index } => (0xA11D, index as u64),
        }
    }
}

/// Regenerates one example batch for `task`: inputs, modality labels, and
/// targets. Identical arguments regenerate identical batches.
pub fn draw_batch(mixture: &Mixture, task_idx: usize, purpose: BatchPurpose) -> Result<(TokenBatch, Matrix)> {
    let task = mixture
        .tasks
        .get(task_idx)
        .ok_or(SmolaError::IndexOutOfRange {
            context: "draw_batch task",
            index: task_idx,
            len: mixture.tasks.len(),
        })?;
    let (tag, index) = purpose.tags();
    let stream = derive_seed(
        derive_seed(derive_seed(mixture.seed, task_idx as u64), tag),
        index,
    );
    let mut rng = Rng::new(stream);
    let n = mixture.spec.tokens_per_example;
    let d_in = mixture.spec.d_in;

    let x = Matrix::from_fn(n, d_in, |_, c| rng.next_gaussian() + task.signature[c]);
    let modality: Vec<Modality> = (0..n)
        .map(|_| {
            if rng.next_f64() < task.modality_profile {
                Modality::Visual
            } else {
                Modality::Text
            }
        })
        .collect();
    let effective = mixture.base.add(&task.target_map)?;
    let mut targets = x.matmul(&effective)?;
    if task.noise_std > 0.0 {
        for v in targets.data_mut() {
            *v += task.noise_std * rng.next_gaussian();
        }
    }
    Ok((TokenBatch::new(x, modality)?, targets))
}

/// Unit-weight linear scalarization: `total = sum_i L_i` with `L_i` the mean
/// squared error over task `i`'s batch.
pub fn multitask_loss(predictions: &[Matrix], targets: &[Matrix]) -> Result<(f64, Vec<f64>)> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(SmolaError::EmptyInput {
            context: "multitask_loss batches",
        });
    }
    let mut per_task = Vec::with_capacity(predictions.len());
    for (p, t) in predictions.iter().zip(targets.iter()) {
        if p.shape() != t.shape() {
            return Err(SmolaError::ShapeMismatch {
                context: "multitask_loss prediction vs target",
                left: p.shape(),
                right: t.shape(),
            });
        }
        let mse = p
            .data()
            .iter()
            .zip(t.data().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.data().len() as f64;
        per_task.push(mse);
    }
    Ok((per_task.iter().sum(), per_task))
}

/// The adapter under training: one of the four arms, all wrapping the same
/// frozen layer.
#[derive(Debug, Clone)]
pub enum TrainModel {
    OmniSmola(OmniAdapter),
    PlainLora(PlainLora),
    GatedMoe { moe: GatedMoeFfn, base: Arc<Matrix> },
    LoraMixture(LoraMixture),
}

impl TrainModel {
    pub fn arm_name(&self) -> &'static str {
        match self {
            Self::OmniSmola(_) => "omni-smola",
            Self::PlainLora(_) => "plain-lora",
            Self::GatedMoe { .. } => "gated-moe",
            Self::LoraMixture(_) => "lora-mixture",
        }
    }

    pub fn base(&self) -> &Arc<Matrix> {
        match self {
            Self::OmniSmola(a) => &a.base,
            Self::PlainLora(l) => &l.base,
            Self::GatedMoe { base, .. } => base,
            Self::LoraMixture(m) => &m.base,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::OmniSmola(a) => {
                a.block_v.config.num_trainable_params()
                    + a.block_t.config.num_trainable_params()
                    + a.block_mm.config.num_trainable_params()
            }
            Self::PlainLora(l) => l.num_trainable_params(),
            Self::GatedMoe { moe, .. } => moe.num_trainable_params(),
            Self::LoraMixture(m) => m.num_trainable_params(),
        }
    }

    /// Uniform per-token weights used when training the mixture baseline.
    fn uniform_weights(n: usize, experts: usize) -> Matrix {
        Matrix::from_fn(n, experts, |_, _| 1.0 / experts as f64)
    }

    /// Model output for a batch.
    pub fn predict(&self, batch: &TokenBatch) -> Result<Matrix> {
        match self {
            Self::OmniSmola(a) => Ok(a.forward(batch)?.0),
            Self::PlainLora(l) => l.apply(&batch.x),
            Self::GatedMoe { moe, base } => {
                let mut y = batch.x.matmul(base)?;
                let h = moe.forward(&batch.x, false)?;
                y.add_assign(&h)?;
                Ok(y)
            }
            Self::LoraMixture(m) => {
                let weights = Self::uniform_weights(batch.x.rows(), m.num_experts());
                m.forward(&batch.x, &weights)
            }
        }
    }

    /// Flattened parameter gradients of `sum(upstream . predict(batch))`,
    /// in the same fixed layout as [`TrainModel::apply_update`].
    pub fn grads(&self, batch: &TokenBatch, upstream: &Matrix) -> Result<Vec<f64>> {
        let mut flat = Vec::with_capacity(self.num_params());
        match self {
            Self::OmniSmola(a) => {
                let (_, cache) = a.forward(batch)?;
                let grads = a.backward(&cache, upstream)?;
                for g in [&grads.block_v, &grads.block_t, &grads.block_mm] {
                    flat.extend_from_slice(g.d_phi.data());
                    flat.push(g.d_alpha);
                    for e in &g.d_experts {
                        flat.extend_from_slice(e.w_in.data());
                        flat.extend_from_slice(e.w_out.data());
                    }
                }
            }
            Self::PlainLora(l) => {
                let (d_w_in, d_w_out) = l.backward(&batch.x, upstream)?;
                flat.extend_from_slice(d_w_in.data());
                flat.extend_from_slice(d_w_out.data());
            }
            Self::GatedMoe { moe, .. } => {
                let (d_gate, d_experts) = moe.backward(&batch.x, upstream)?;
                flat.extend_from_slice(d_gate.data());
                for (d_w_in, d_w_out) in &d_experts {
                    flat.extend_from_slice(d_w_in.data());
                    flat.extend_from_slice(d_w_out.data());
                }
            }
            Self::LoraMixture(m) => {
                let weights = Self::uniform_weights(batch.x.rows(), m.num_experts());
                let grads = m.backward(&batch.x, &weights, upstream)?;
                for (d_w_in, d_w_out) in &grads {
                    flat.extend_from_slice(d_w_in.data());
                    flat.extend_from_slice(d_w_out.data());
                }
            }
        }
        debug_assert_eq!(flat.len(), self.num_params());
        Ok(flat)
    }

    /// Adds `delta` to the parameters in the fixed flat layout.
    pub fn apply_update(&mut self, delta: &[f64]) {
        fn take(m: &mut Matrix, delta: &[f64], offset: &mut usize) {
            for v in m.data_mut() {
                *v += delta[*offset];
                *offset += 1;
            }
        }
        let mut offset = 0;
        match self {
            Self::OmniSmola(a) => {
                for block in [&mut a.block_v, &mut a.block_t, &mut a.block_mm] {
                    take(&mut block.phi, delta, &mut offset);
                    block.alpha += delta[offset];
                    offset += 1;
                    for e in &mut block.experts {
                        take(&mut e.w_in, delta, &mut offset);
                        take(&mut e.w_out, delta, &mut offset);
                    }
                }
            }
            Self::PlainLora(l) => {
                take(&mut l.w_in, delta, &mut offset);
                take(&mut l.w_out, delta, &mut offset);
            }
            Self::GatedMoe { moe, .. } => {
                take(&mut moe.gate, delta, &mut offset);
                for (w_in, w_out) in &mut moe.experts {
                    take(w_in, delta, &mut offset);
                    take(w_out, delta, &mut offset);
                }
            }
            Self::LoraMixture(m) => {
                for (w_in, w_out) in &mut m.experts {
                    take(w_in, delta, &mut offset);
                    take(w_out, delta, &mut offset);
                }
            }
        }
        assert_eq!(offset, delta.len(), "update length must match layout");
    }

    /// Self-contained JSON form (base embedded as CSV) used by train states.
    pub fn to_value(&self) -> serde_json::Value {
        let base_csv = matrix_to_csv(self.base());
        match self {
            Self::OmniSmola(a) => serde_json::json!({
                "arm": self.arm_name(),
                "base_csv": base_csv,
                "block_v": checkpoint::block_to_file(&a.block_v, ""),
                "block_t": checkpoint::block_to_file(&a.block_t, ""),
                "block_mm": checkpoint::block_to_file(&a.block_mm, ""),
            }),
            Self::PlainLora(l) => serde_json::json!({
                "arm": self.arm_name(),
                "base_csv": base_csv,
                "w_in_csv": matrix_to_csv(&l.w_in),
                "w_out_csv": matrix_to_csv(&l.w_out),
            }),
            Self::GatedMoe { moe, .. } => serde_json::json!({
                "arm": self.arm_name(),
                "base_csv": base_csv,
                "gate_csv": matrix_to_csv(&moe.gate),
                "experts": moe.experts.iter().map(|(a, b)| serde_json::json!({
                    "w_in_csv": matrix_to_csv(a),
                    "w_out_csv": matrix_to_csv(b),
                })).collect::<Vec<_>>(),
            }),
            Self::LoraMixture(m) => serde_json::json!({
                "arm": self.arm_name(),
                "base_csv": base_csv,
                "experts": m.experts.iter().map(|(a, b)| serde_json::json!({
                    "w_in_csv": matrix_to_csv(a),
                    "w_out_csv": matrix_to_csv(b),
                })).collect::<Vec<_>>(),
            }),
        }
    }

    /// Rebuilds a model from [`TrainModel::to_value`] output.
    pub fn from_value(value: &serde_json::Value) -> Result<Self> {
        let bad = |reason: &str| SmolaError::Corrupt {
            path: "<train model value>".to_string(),
            reason: reason.to_string(),
        };
        let arm = value["arm"].as_str().ok_or_else(|| bad("missing arm"))?;
        let base_csv = value["base_csv"].as_str().ok_or_else(|| bad("missing base_csv"))?;
        let base = Arc::new(matrix_from_csv(base_csv)?);
        let expert_pairs = |v: &serde_json::Value| -> Result<Vec<(Matrix, Matrix)>> {
            v.as_array()
                .ok_or_else(|| bad("experts must be an array"))?
                .iter()
                .map(|e| {
                    let w_in = matrix_from_csv(
                        e["w_in_csv"].as_str().ok_or_else(|| bad("missing w_in_csv"))?,
                    )?;
                    let w_out = matrix_from_csv(
                        e["w_out_csv"].as_str().ok_or_else(|| bad("missing w_out_csv"))?,
                    )?;
                    Ok((w_in, w_out))
                })
                .collect()
        };
        match arm {
            "omni-smola" => {
                let parse = |key: &str| -> Result<SmolaBlock> {
                    let file: checkpoint::BlockFile = serde_json::from_value(value[key].clone())
                        .map_err(|e| bad(&e.to_string()))?;
                    checkpoint::block_from_file(&file, base.clone(), std::path::Path::new(key))
                };
                let adapter = OmniAdapter::new(parse("block_v")?, parse("block_t")?, parse("block_mm")?)?;
                Ok(Self::OmniSmola(adapter))
            }
            "plain-lora" => {
                let w_in = matrix_from_csv(
                    value["w_in_csv"].as_str().ok_or_else(|| bad("missing w_in_csv"))?,
                )?;
                let w_out = matrix_from_csv(
                    value["w_out_csv"].as_str().ok_or_else(|| bad("missing w_out_csv"))?,
                )?;
                Ok(Self::PlainLora(PlainLora::new(w_in, w_out, base)?))
            }
            "gated-moe" => {
                let gate = matrix_from_csv(
                    value["gate_csv"].as_str().ok_or_else(|| bad("missing gate_csv"))?,
                )?;
                let moe = GatedMoeFfn::new(expert_pairs(&value["experts"])?, gate)?;
                Ok(Self::GatedMoe { moe, base })
            }
            "lora-mixture" => {
                let mixture = LoraMixture::new(expert_pairs(&value["experts"])?, base)?;
                Ok(Self::LoraMixture(mixture))
            }
            other => Err(bad(&format!("unknown arm {other:?}"))),
        }
    }
}

/// One validation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub per_task_loss: Vec<f64>,
    pub avg: f64,
    /// Negative average loss; higher is better.
    pub score: f64,
    /// Multitask training loss at this step's batches, for convergence
    /// monitoring.
    pub train_total: f64,
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub momentum: f64,
    /// Validation batches per task at each evaluation.
    pub val_batches: usize,
    /// When nonzero, training batches cycle with period `batch_cycle`
    /// instead of being fresh every step (full-batch descent at 1).
    pub batch_cycle: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            eval_every: 100,
            seed: 7,
            momentum: 0.9,
            val_batches: 4,
            batch_cycle: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(SmolaError::InvalidConfig {
                reason: format!("lr must be positive and finite, got {}", self.lr),
            });
        }
        if self.eval_every == 0 {
            return Err(SmolaError::InvalidConfig {
                reason: "eval_every must be at least 1".into(),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SmolaError::InvalidConfig {
                reason: format!("momentum must be in [0, 1), got {}", self.momentum),
            });
        }
        if self.val_batches == 0 {
            return Err(SmolaError::InvalidConfig {
                reason: "val_batches must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Full optimizer state; serializable and resumable bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: TrainModel,
    pub moments: Vec<f64>,
    pub step: usize,
    pub best_validation: f64,
    pub best_checkpoint: serde_json::Value,
    pub history: Vec<EvalRecord>,
    pub base_hash: u64,
}

impl TrainState {
    pub fn new(model: TrainModel) -> Self {
        let params = model.num_params();
        let base_hash = hash_matrix(model.base());
        let best_checkpoint = model.to_value();
        Self {
            model,
            moments: vec![0.0; params],
            step: 0,
            best_validation: f64::NEG_INFINITY,
            best_checkpoint,
            history: Vec::new(),
            base_hash,
        }
    }

    pub fn final_avg_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.avg)
    }
}

/// FNV-1a over the big-endian bit patterns of every entry.
pub fn hash_matrix(m: &Matrix) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in m.data() {
        for byte in v.to_bits().to_be_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    }
    h
}

fn evaluate(model: &TrainModel, mixture: &Mixture, opts: &TrainOptions) -> Result<(f64, Vec<f64>)> {
    let mut per_task = vec![0.0; mixture.tasks.len()];
    for (t, acc) in per_task.iter_mut().enumerate() {
        let mut task_loss = 0.0;
        for index in 0..opts.val_batches {
            let (batch, targets) = draw_batch(mixture, t, BatchPurpose::Validation { index })?;
            let pred = model.predict(&batch)?;
            let (loss, _) = multitask_loss(&[pred], &[targets])?;
            task_loss += loss;
        }
        *acc = task_loss / opts.val_batches as f64;
    }
    let avg = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok((avg, per_task))
}

/// Trains from a fresh state. See [`train_continue`] for the loop itself.
pub fn train(model: TrainModel, mixture: &Mixture, opts: &TrainOptions) -> Result<TrainState> {
    let state = TrainState::new(model);
    train_continue(state, mixture, opts)
}

/// Runs the training loop until `opts.steps`, starting from (and consuming)
/// an existing state. Resuming a serialized state reproduces an
/// uninterrupted run bit-for-bit: batches are a pure function of
/// `(seed, task, step)` and the optimizer state is part of `TrainState`.
pub fn train_continue(
    mut state: TrainState,
    mixture: &Mixture,
    opts: &TrainOptions,
) -> Result<TrainState> {
    opts.validate()?;
    if state.model.base().shape() != mixture.base.shape()
        || state.model.base().data() != mixture.base.data()
    {
        return Err(SmolaError::InvalidConfig {
            reason: "model and mixture must share the frozen backbone".into(),
        });
    }

    // Initial evaluation so even steps == 0 leaves a record.
    if state.step == 0 && state.history.is_empty() {
        let (avg, per_task) = evaluate(&state.model, mixture, opts)?;
        let train_total = avg_train_loss(&state.model, mixture, opts, 0)?;
        record_eval(&mut state, 0, avg, per_task, train_total);
    }

    while state.step < opts.steps {
        let step = state.step + 1;
        let mut grads = vec![0.0; state.model.num_params()];
        let mut train_total = 0.0;
        for t in 0..mixture.tasks.len() {
            let batch_step = batch_index(opts, step);
            let (batch, targets) =
                draw_batch(mixture, t, BatchPurpose::Train { step: batch_step })?;
            let pred = state.model.predict(&batch)?;
            let (loss, _) = multitask_loss(&[pred.clone()], &[targets.clone()])?;
            train_total += loss;
            // d(mse)/d(pred) = 2 (pred - target) / count.
            let count = pred.data().len() as f64;
            let upstream = Matrix::from_fn(pred.rows(), pred.cols(), |r, c| {
                2.0 * (pred.get(r, c) - targets.get(r, c)) / count
            });
            let g = state.model.grads(&batch, &upstream)?;
            for (acc, v) in grads.iter_mut().zip(g.iter()) {
                *acc += v;
            }
        }
        if !train_total.is_finite() {
            return Err(SmolaError::Diverged { step });
        }
        for (m, g) in state.moments.iter_mut().zip(grads.iter()) {
            *m = opts.momentum * *m + g;
        }
        let delta: Vec<f64> = state.moments.iter().map(|m| -opts.lr * m).collect();
        state.model.apply_update(&delta);
        state.step = step;

        if step % opts.eval_every == 0 || step == opts.steps {
            if hash_matrix(state.model.base()) != state.base_hash {
                return Err(SmolaError::InvalidConfig {
                    reason: "frozen backbone changed during training".into(),
                });
            }
            let (avg, per_task) = evaluate(&state.model, mixture, opts)?;
            if !avg.is_finite() {
                return Err(SmolaError::Diverged { step });
            }
            record_eval(&mut state, step, avg, per_task, train_total);
        }
    }

    if hash_matrix(state.model.base()) != state.base_hash {
        return Err(SmolaError::InvalidConfig {
            reason: "frozen backbone changed during training".into(),
        });
    }
    Ok(state)
}

fn batch_index(opts: &TrainOptions, step: usize) -> usize {
    if opts.batch_cycle > 0 {
        step % opts.batch_cycle
    } else {
        step
    }
}

fn avg_train_loss(
    model: &TrainModel,
    mixture: &Mixture,
    opts: &TrainOptions,
    step: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..mixture.tasks.len() {
        let (batch, targets) = draw_batch(
            mixture,
            t,
            BatchPurpose::Train {
                step: batch_index(opts, step.max(1)),
            },
        )?;
        let pred = model.predict(&batch)?;
        let (loss, _) = multitask_loss(&[pred], &[targets])?;
        total += loss;
    }
    Ok(total)
}

fn record_eval(state: &mut TrainState, step: usize, avg: f64, per_task: Vec<f64>, train_total: f64) {
    let score = -avg;
    if score > state.best_validation {
        state.best_validation = score;
        state.best_checkpoint = state.model.to_value();
    }
    state.history.push(EvalRecord {
        step,
        per_task_loss: per_task,
        avg,
        score,
        train_total,
    });
}

/// Serialized form of a train state (single self-contained JSON document).
#[derive(Debug, Serialize, Deserialize)]
struct TrainStateFile {
    kind: String,
    step: usize,
    best_validation: f64,
    moments_csv: String,
    model: serde_json::Value,
    best_checkpoint: serde_json::Value,
    history: Vec<EvalRecord>,
    base_hash: u64,
}

pub const TRAIN_STATE_KIND: &str = "train_state";

pub fn save_train_state(state: &TrainState, path: &std::path::Path) -> Result<()> {
    let moments = Matrix::from_vec(1, state.moments.len().max(1), {
        if state.moments.is_empty() {
            vec![0.0]
        } else {
            state.moments.clone()
        }
    })?;
    let file = TrainStateFile {
        kind: TRAIN_STATE_KIND.to_string(),
        step: state.step,
        best_validation: state.best_validation,
        moments_csv: matrix_to_csv(&moments),
        model: state.model.to_value(),
        best_checkpoint: state.best_checkpoint.clone(),
        history: state.history.clone(),
        base_hash: state.base_hash,
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| SmolaError::Corrupt {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_train_state(path: &std::path::Path) -> Result<TrainState> {
    let text = std::fs::read_to_string(path)?;
    let file: TrainStateFile = serde_json::from_str(&text).map_err(|e| SmolaError::Corrupt {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if file.kind != TRAIN_STATE_KIND {
        return Err(SmolaError::Corrupt {
            path: path.display().to_string(),
            reason: format!("expected kind {TRAIN_STATE_KIND:?}, found {:?}", file.kind),
        });
    }
    let model = TrainModel::from_value(&file.model)?;
    let moments_matrix = matrix_from_csv(&file.moments_csv)?;
    let mut moments = moments_matrix.data().to_vec();
    moments.truncate(model.num_params());
    if moments.len() != model.num_params() {
        return Err(SmolaError::Corrupt {
            path: path.display().to_string(),
            reason: "momentum buffer length disagrees with model".to_string(),
        });
    }
    Ok(TrainState {
        model,
        moments,
        step: file.step,
        best_validation: file.best_validation,
        best_checkpoint: file.best_checkpoint,
        history: file.history,
        base_hash: file.base_hash,
    })
}

/// Builds the standard zero-initialized omni adapter for a mixture: three
/// blocks with `num_experts` experts of rank `rank` each over the mixture's
/// frozen layer.
pub fn build_omni_arm(
    mixture: &Mixture,
    num_experts: usize,
    rank: usize,
    alpha_init: f64,
    init_scale: f64,
    seed: u64,
) -> Result<TrainModel> {
    let cfg = |tag: u64| SmolaConfig {
        num_experts,
        rank,
        d_in: mixture.spec.d_in,
        d_out: mixture.spec.d_out,
        alpha_init,
        init_scale,
        seed: derive_seed(seed, tag),
    };
    let adapter = OmniAdapter::new(
        SmolaBlock::init(cfg(1), mixture.base.clone())?,
        SmolaBlock::init(cfg(2), mixture.base.clone())?,
        SmolaBlock::init(cfg(3), mixture.base.clone())?,
    )?;
    Ok(TrainModel::OmniSmola(adapter))
}

/// Plain LoRA arm, zero-initialized on the output factor.
pub fn build_lora_arm(mixture: &Mixture, rank: usize, init_scale: f64, seed: u64) -> Result<TrainModel> {
    if rank == 0 || rank > mixture.spec.d_in.min(mixture.spec.d_out) {
        return Err(SmolaError::InvalidConfig {
            reason: format!("lora rank {rank} out of range"),
        });
    }
    let mut rng = Rng::new(derive_seed(seed, 11));
    let std = init_scale / (mixture.spec.d_in as f64).sqrt();
    let w_in = Matrix::from_fn(rank, mixture.spec.d_in, |_, _| rng.next_gaussian() * std);
    let w_out = Matrix::zeros(mixture.spec.d_out, rank);
    Ok(TrainModel::PlainLora(PlainLora::new(
        w_in,
        w_out,
        mixture.base.clone(),
    )?))
}

/// LoRA rank whose trainable parameter count best matches `target_params`.
pub fn matched_lora_rank(mixture: &Mixture, target_params: usize) -> usize {
    let per_rank = mixture.spec.d_in + mixture.spec.d_out;
    let rank = (target_params as f64 / per_rank as f64).round() as usize;
    rank.clamp(1, mixture.spec.d_in.min(mixture.spec.d_out))
}

/// Gated MoE-FFN arm (residual over the frozen layer); requires
/// `d_in == d_out`.
pub fn build_gated_moe_arm(
    mixture: &Mixture,
    num_experts: usize,
    d_hidden: usize,
    seed: u64,
) -> Result<TrainModel> {
    if mixture.spec.d_in != mixture.spec.d_out {
        return Err(SmolaError::InvalidConfig {
            reason: "gated-moe arm needs d_in == d_out (FFN maps back to the model width)".into(),
        });
    }
    if num_experts == 0 || d_hidden == 0 {
        return Err(SmolaError::InvalidConfig {
            reason: "gated-moe arm needs at least one expert and a nonzero hidden width".into(),
        });
    }
    let d = mixture.spec.d_in;
    let mut rng = Rng::new(derive_seed(seed, 12));
    let std = 1.0 / (d as f64).sqrt();
    let experts = (0..num_experts)
        .map(|_| {
            let w_in = Matrix::from_fn(d_hidden, d, |_, _| rng.next_gaussian() * std);
            let w_out = Matrix::zeros(d, d_hidden);
            (w_in, w_out)
        })
        .collect();
    let gate = Matrix::from_fn(num_experts, d, |_, _| rng.next_gaussian() * std);
    Ok(TrainModel::GatedMoe {
        moe: GatedMoeFfn::new(experts, gate)?,
        base: mixture.base.clone(),
    })
}

/// Mixture-of-LoRA arm (uniform mixing weights during training).
pub fn build_lora_mixture_arm(
    mixture: &Mixture,
    num_experts: usize,
    rank: usize,
    init_scale: f64,
    seed: u64,
) -> Result<TrainModel> {
    if num_experts == 0 || rank == 0 {
        return Err(SmolaError::InvalidConfig {
            reason: "lora-mixture arm needs at least one expert of rank >= 1".into(),
        });
    }
    let mut rng = Rng::new(derive_seed(seed, 13));
    let std = init_scale / (mixture.spec.d_in as f64).sqrt();
    let experts = (0..num_experts)
        .map(|_| {
            let w_in = Matrix::from_fn(rank, mixture.spec.d_in, |_, _| rng.next_gaussian() * std);
            let w_out = Matrix::zeros(mixture.spec.d_out, rank);
            (w_in, w_out)
        })
        .collect();
    Ok(TrainModel::LoraMixture(LoraMixture::new(
        experts,
        mixture.base.clone(),
    )?))
}
