//! Multi-artifact subspace fine-tuning with selective layer masking.
//!
//! Pretrained attention projections are split by SVD into a frozen
//! high-energy semantic part and `K` trainable low-energy artifact parts.
//! Fine-tuning updates only the artifact factors (plus a binary head), and a
//! per-iteration layer mask driven by gradient bias/variance statistics picks
//! which layers move. Everything runs on a miniature attention classifier
//! trained on synthetic multi-artifact data.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod slm;
pub mod subspace;
pub mod tensor;

pub use data::{ArtifactFamily, DataConfig, Splits, SyntheticSample};
pub use error::{MasmError, Result};
pub use harness::{Checkpoint, RunRecord, TrainConfig};
pub use losses::{LossReport, LossWeights};
pub use metrics::{MetricSummary, Pooling, ScoredSet};
pub use network::{Model, ModelConfig};
pub use slm::{LayerMask, OptimizerMode, StatsConfig};
pub use subspace::{DecomposedLayer, DecompositionConfig, RankPolicy};
pub use tensor::{frobenius_sq, svd, Matrix, Rng, SvdResult};
