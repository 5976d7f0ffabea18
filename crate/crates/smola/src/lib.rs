//! Soft mixture of low-rank experts over frozen linear layers.
//!
//! A desk-scale library for the SMoLA mechanism: soft-MoE routing over
//! zero-initialized low-rank adapters attached to a frozen linear layer,
//! modality-partitioned composition, exact analytic gradients, cost
//! accounting, reference baseline adapters, a toy multitask trainer, and
//! routing/spectral diagnostics.

pub mod baselines;
pub mod block;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod numkit;
pub mod omni;
pub mod trainer;

pub use block::{Expert, ForwardCache, MaddBreakdown, RoutingWeights, SmolaBlock, SmolaConfig, SmolaGradients};
pub use error::{Result, SmolaError};
pub use numkit::Matrix;
pub use omni::{Modality, OmniAdapter, TokenBatch};
