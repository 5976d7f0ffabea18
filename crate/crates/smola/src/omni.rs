//! Modality-partitioned composition: a visual-token block, a text-token
//! block, and an all-token block over one shared frozen layer, with their
//! expert corrections summed on top of the backbone output.
//!
//! The backbone term is counted once. Each block contributes only its
//! correction; the single-modality corrections are computed on the matching
//! token submatrix and scattered back to those positions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::block::{ForwardCache, MaddBreakdown, SmolaBlock, SmolaGradients};
use crate::error::{Result, SmolaError};
use crate::numkit::Matrix;

/// Per-token modality label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

/// A batch of tokens with their modality labels.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub x: Matrix,
    pub modality: Vec<Modality>,
}

impl TokenBatch {
    pub fn new(x: Matrix, modality: Vec<Modality>) -> Result<Self> {
        if modality.len() != x.rows() {
            return Err(SmolaError::ShapeMismatch {
                context: "TokenBatch modality labels",
                left: (x.rows(), 1),
                right: (modality.len(), 1),
            });
        }
        Ok(Self { x, modality })
    }

    pub fn n_tokens(&self) -> usize {
        self.x.rows()
    }

    fn positions_of(&self, wanted: Modality) -> Vec<usize> {
        self.modality
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (m == wanted).then_some(i))
            .collect()
    }
}

/// Three SMoLA blocks composed over one base layer: one restricted to visual
/// tokens, one to text tokens, one over all tokens.
#[derive(Debug, Clone)]
pub struct OmniAdapter {
    pub block_v: SmolaBlock,
    pub block_t: SmolaBlock,
    pub block_mm: SmolaBlock,
    pub base: Arc<Matrix>,
}

/// Caches from one omni forward; single-modality entries are absent when the
/// batch had no tokens of that modality (the block is skipped, not evaluated
/// on an empty set).
#[derive(Debug, Clone)]
pub struct OmniCache {
    pub mm: ForwardCache,
    pub visual: Option<(Vec<usize>, ForwardCache)>,
    pub text: Option<(Vec<usize>, ForwardCache)>,
}

/// Gradients for all three blocks plus the input.
#[derive(Debug, Clone)]
pub struct OmniGradients {
    pub block_v: SmolaGradients,
    pub block_t: SmolaGradients,
    pub block_mm: SmolaGradients,
    pub d_input: Matrix,
}

impl OmniAdapter {
    /// Composes three blocks that must share one base layer (same values)
    /// and agree on dimensions. Expert counts may differ per block.
    pub fn new(block_v: SmolaBlock, block_t: SmolaBlock, block_mm: SmolaBlock) -> Result<Self> {
        let base = block_mm.base.clone();
        for block in [&block_v, &block_t] {
            if block.base.shape() != base.shape() || block.base.data() != base.data() {
                return Err(SmolaError::InvalidConfig {
                    reason: "omni blocks must share the identical base layer".into(),
                });
            }
            if block.config.d_in != block_mm.config.d_in
                || block.config.d_out != block_mm.config.d_out
            {
                return Err(SmolaError::InvalidConfig {
                    reason: "omni blocks must agree on d_in and d_out".into(),
                });
            }
        }
        Ok(Self {
            block_v,
            block_t,
            block_mm,
            base,
        })
    }

    pub fn d_in(&self) -> usize {
        self.block_mm.config.d_in
    }

    pub fn d_out(&self) -> usize {
        self.block_mm.config.d_out
    }

    /// `Y = X W* + corr_MM + scatter(corr_V) + scatter(corr_T)`, with the
    /// backbone term added exactly once and empty modality partitions
    /// skipped. Summation order is fixed: MM, then V, then T.
    pub fn forward(&self, batch: &TokenBatch) -> Result<(Matrix, OmniCache)> {
        let mut sink = MaddBreakdown::default();
        self.forward_with_tally(batch, &mut sink)
    }

    pub(crate) fn forward_with_tally(
        &self,
        batch: &TokenBatch,
        tally: &mut MaddBreakdown,
    ) -> Result<(Matrix, OmniCache)> {
        if batch.modality.len() != batch.x.rows() {
            return Err(SmolaError::ShapeMismatch {
                context: "omni_forward modality labels",
                left: (batch.x.rows(), 1),
                right: (batch.modality.len(), 1),
            });
        }
        let mut y = batch.x.matmul_counting(&self.base, &mut tally.backbone)?;

        let (corr_mm, mm_cache) = self.block_mm.correction_with_tally(&batch.x, tally)?;
        y.add_assign(&corr_mm)?;

        let visual = self.partial_correction(&self.block_v, batch, Modality::Visual, &mut y, tally)?;
        let text = self.partial_correction(&self.block_t, batch, Modality::Text, &mut y, tally)?;

        Ok((
            y,
            OmniCache {
                mm: mm_cache,
                visual,
                text,
            },
        ))
    }

    fn partial_correction(
        &self,
        block: &SmolaBlock,
        batch: &TokenBatch,
        wanted: Modality,
        y: &mut Matrix,
        tally: &mut MaddBreakdown,
    ) -> Result<Option<(Vec<usize>, ForwardCache)>> {
        let positions = batch.positions_of(wanted);
        if positions.is_empty() {
            return Ok(None);
        }
        let sub = batch.x.select_rows(&positions);
        let (corr, cache) = block.correction_with_tally(&sub, tally)?;
        for (local, &global) in positions.iter().enumerate() {
            for c in 0..corr.cols() {
                y.set(global, c, y.get(global, c) + corr.get(local, c));
            }
        }
        Ok(Some((positions, cache)))
    }

    /// Gradients of `sum(upstream . Y)`: per-block parameter gradients plus
    /// the input gradient, which sums the backbone pullback (added once) and
    /// each block's input pullback scattered to its token positions.
    pub fn backward(&self, cache: &OmniCache, upstream: &Matrix) -> Result<OmniGradients> {
        let n = cache.mm.n_tokens();
        if upstream.shape() != (n, self.d_out()) {
            return Err(SmolaError::ShapeMismatch {
                context: "omni_backward upstream",
                left: (n, self.d_out()),
                right: upstream.shape(),
            });
        }

        let mut d_input = upstream.matmul(&self.base.transpose())?;

        let mm_grads = self.block_mm.correction_backward(&cache.mm, upstream)?;
        d_input.add_assign(&mm_grads.d_input)?;

        let v_grads = self.partial_backward(&self.block_v, &cache.visual, upstream, &mut d_input)?;
        let t_grads = self.partial_backward(&self.block_t, &cache.text, upstream, &mut d_input)?;

        Ok(OmniGradients {
            block_v: v_grads,
            block_t: t_grads,
            block_mm: mm_grads,
            d_input,
        })
    }

    fn partial_backward(
        &self,
        block: &SmolaBlock,
        entry: &Option<(Vec<usize>, ForwardCache)>,
        upstream: &Matrix,
        d_input: &mut Matrix,
    ) -> Result<SmolaGradients> {
        match entry {
            None => Ok(SmolaGradients::zeros_like(block, 0)),
            Some((positions, cache)) => {
                let sub_upstream = upstream.select_rows(positions);
                let grads = block.correction_backward(cache, &sub_upstream)?;
                for (local, &global) in positions.iter().enumerate() {
                    for c in 0..d_input.cols() {
                        let v = d_input.get(global, c) + grads.d_input.get(local, c);
                        d_input.set(global, c, v);
                    }
                }
                Ok(grads)
            }
        }
    }
}
