use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{MasmError, Result};
use crate::losses::LossWeights;
use crate::metrics::Pooling;
use crate::network::ModelConfig;
use crate::slm::{OptimizerMode, StatsConfig};
use crate::subspace::DecompositionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Selective layer masking on/off. Off means every layer updates every step.
    pub enabled: bool,
    /// Layers updated per iteration; clamped to the layer count.
    pub m: usize,
    /// All layers active for `t <= warmup_steps`; `None` means one epoch.
    pub warmup_steps: Option<usize>,
    /// Layers held fixed for the whole run.
    pub forced_off: Vec<usize>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { enabled: true, m: 16, warmup_steps: None, forced_off: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub mode: OptimizerMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { mode: OptimizerMode::Adam, lr: 2e-4, batch_size: 32, epochs: 10 }
    }
}

/// Full-model training of the backbone on base classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Epoch cap.
    pub epochs: usize,
    /// Epochs run before the accuracy floor may end pretraining.
    pub min_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Base-class test accuracy that ends pretraining.
    pub accuracy_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 40, min_epochs: 5, lr: 3e-3, batch_size: 32, accuracy_floor: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogConfig {
    /// Per-iteration loss and mask CSV.
    pub iterations: Option<PathBuf>,
    /// Raw per-layer gradients, for offline mask replay.
    pub gradients: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Subspace decomposition of attention projections. Off means the dense
    /// projections are fine-tuned directly.
    pub masft: bool,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub decomposition: DecompositionConfig,
    pub mask: MaskConfig,
    pub stats: StatsConfig,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    pub log: LogConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            masft: true,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            decomposition: DecompositionConfig::default(),
            mask: MaskConfig::default(),
            stats: StatsConfig::default(),
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
            log: LogConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.decomposition.validate()?;
        self.stats.validate()?;
        self.weights.validate()?;
        if self.data.n_base_classes != self.model.n_classes_pretrain {
            return Err(MasmError::Config(format!(
                "data.n_base_classes = {} but model.n_classes_pretrain = {}",
                self.data.n_base_classes, self.model.n_classes_pretrain
            )));
        }
        if self.mask.m == 0 {
            return Err(MasmError::Config("mask.m must be >= 1".into()));
        }
        let n = self.model.n_layers();
        if let Some(l) = self.mask.forced_off.iter().find(|&&l| l >= n) {
            return Err(MasmError::Config(format!("mask.forced_off names layer {l} but the model has {n}")));
        }
        for (name, lr, batch) in [
            ("optimizer", self.optimizer.lr, self.optimizer.batch_size),
            ("pretrain", self.pretrain.lr, self.pretrain.batch_size),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(MasmError::Config(format!("{name}.lr must be a positive number")));
            }
            if batch == 0 {
                return Err(MasmError::Config(format!("{name}.batch_size must be >= 1")));
            }
        }
        if self.pretrain.min_epochs > self.pretrain.epochs {
            return Err(MasmError::Config("pretrain.min_epochs exceeds pretrain.epochs".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain.accuracy_floor) {
            return Err(MasmError::Config("pretrain.accuracy_floor must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Mask size actually used: `min(m, n)` with masking on, `n` with it off.
    pub fn effective_m(&self) -> usize {
        let n = self.model.n_layers();
        if self.mask.enabled {
            self.mask.m.min(n)
        } else {
            n
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn dims(&self) -> crate::data::Dims {
        crate::data::Dims { n_tokens: self.model.n_tokens, d_model: self.model.d_model }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::RankPolicy;

    #[test]
    fn defaults_are_the_reference_preset() {
        let c = TrainConfig::default();
        assert_eq!(c.decomposition.k, 5);
        assert_eq!(c.mask.m, 16);
        assert_eq!((c.weights.lambda_orth, c.weights.lambda_spec), (1.0, 1.0));
        assert_eq!(c.optimizer.lr, 2e-4);
        assert_eq!((c.optimizer.batch_size, c.optimizer.epochs), (32, 10));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        let partial = "seed = 7\n[decomposition]\nk = 3\nrank_policy = { fixed = 4 }\n";
        let p = TrainConfig::from_toml_str(partial).unwrap();
        assert_eq!(p.seed, 7);
        assert_eq!(p.decomposition.rank_policy, RankPolicy::Fixed(4));
        assert_eq!(p.mask, MaskConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(TrainConfig::from_toml_str("sed = 1\n").is_err());
        assert!(TrainConfig::from_toml_str("[optimizer]\nlearning_rate = 1.0\n").is_err());
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = TrainConfig::default();
        c.mask.forced_off = vec![24];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.optimizer.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.data.n_base_classes = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn effective_m_clamps() {
        let mut c = TrainConfig::default();
        c.mask.m = 96;
        assert_eq!(c.effective_m(), 24);
        c.mask.m = 4;
        c.mask.enabled = false;
        assert_eq!(c.effective_m(), 24);
    }
}
