//! Selective layer masking.
//!
//! Every iteration, each adaptable layer's gradient feeds exponential moving
//! averages of its first and second moments. The ratio of squared mean to
//! estimated variance (BVG) ranks layers; the top `m` receive the update,
//! the rest keep their parameters and optimizer moments untouched.

use serde::{Deserialize, Serialize};

use crate::error::{MasmError, Result};
use crate::network::{Gradients, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    /// EMA coefficient in `[0, 1)`.
    pub alpha: f64,
    /// Floor on the BVG denominator.
    pub eps: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { alpha: 0.9, eps: 1e-12 }
    }
}

impl StatsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(MasmError::Config(format!("alpha {} outside [0, 1)", self.alpha)));
        }
        if !(self.eps > 0.0) {
            return Err(MasmError::Config("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-layer EMA gradient moments.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStats {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: usize,
}

impl GradientStats {
    pub fn new(layer_sizes: &[usize]) -> Self {
        GradientStats {
            first: layer_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: layer_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        let sizes: Vec<usize> = model.layers().map(|p| p.param_len()).collect();
        GradientStats::new(&sizes)
    }

    /// `mu <- a mu + (1 - a) g`, `sigma <- a sigma + (1 - a) g^2`, for every layer.
    pub fn update(&mut self, grads: &[Vec<f64>], alpha: f64) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(MasmError::Shape(format!("{} layer gradients for {} layers", grads.len(), self.first.len())));
        }
        for (l, g) in grads.iter().enumerate() {
            if g.len() != self.first[l].len() {
                return Err(MasmError::Shape(format!(
                    "layer {l}: gradient has {} entries, stats track {}",
                    g.len(),
                    self.first[l].len()
                )));
            }
        }
        for ((mu, sigma), g) in self.first.iter_mut().zip(&mut self.second).zip(grads) {
            for ((m, s), &gi) in mu.iter_mut().zip(sigma.iter_mut()).zip(g) {
                *m = alpha * *m + (1.0 - alpha) * gi;
                *s = alpha * *s + (1.0 - alpha) * gi * gi;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// `sum mu^2 / max(sum (sigma - mu^2), eps)` per layer.
    pub fn bvg(&self, eps: f64) -> Vec<f64> {
        self.first
            .iter()
            .zip(&self.second)
            .map(|(mu, sigma)| {
                let num: f64 = mu.iter().map(|m| m * m).sum();
                let den: f64 = mu.iter().zip(sigma).map(|(m, s)| s - m * m).sum();
                num / den.max(eps)
            })
            .collect()
    }
}

pub fn update_stats(stats: &GradientStats, grads: &[Vec<f64>], cfg: &StatsConfig) -> Result<GradientStats> {
    let mut next = stats.clone();
    next.update(grads, cfg.alpha)?;
    Ok(next)
}

pub fn compute_bvg(stats: &GradientStats, cfg: &StatsConfig) -> Vec<f64> {
    stats.bvg(cfg.eps)
}

/// Binary per-layer update gate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub bits: Vec<bool>,
    pub m: usize,
}

impl LayerMask {
    pub fn all(n: usize) -> Self {
        LayerMask { bits: vec![true; n], m: n }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// How masks are built in a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPolicy {
    pub m: usize,
    pub warmup_steps: usize,
    /// Layers held at `M = 0` for the whole run; excluded from selection.
    pub forced_off: Vec<usize>,
}

/// Top-`m` layers by score after warmup (ties to the lower layer index),
/// everything before. `t` counts iterations from 1.
pub fn build_mask(bvg: &[f64], t: usize, policy: &MaskPolicy) -> LayerMask {
    let n = bvg.len();
    let mut bits = vec![false; n];
    if t <= policy.warmup_steps {
        bits.iter_mut().for_each(|b| *b = true);
    } else {
        let mut order: Vec<usize> = (0..n).filter(|l| !policy.forced_off.contains(l)).collect();
        order.sort_by(|&a, &b| bvg[b].total_cmp(&bvg[a]).then(a.cmp(&b)));
        for &l in order.iter().take(policy.m) {
            bits[l] = true;
        }
    }
    for &l in &policy.forced_off {
        if l < n {
            bits[l] = false;
        }
    }
    LayerMask { bits, m: policy.m }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// `theta <- theta - lr g`.
    Sgd,
    /// Bias-corrected first/second moment step.
    Adam,
}

/// Adam moments for one parameter group. `t` counts the group's own updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamMoments {
    pub fn new(n: usize) -> Self {
        AdamMoments { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Parameter deltas for this step; advances the moments.
    pub fn direction(&mut self, grad: &[f64], lr: f64) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                -lr * mhat / (vhat.sqrt() + ADAM_EPS)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub mode: OptimizerMode,
    pub lr: f64,
    /// Present only in Adam mode: one entry per adaptable layer, then the head.
    pub layer_moments: Vec<AdamMoments>,
    pub head_moments: Option<AdamMoments>,
}

impl OptimizerState {
    pub fn new(mode: OptimizerMode, lr: f64, model: &Model) -> Self {
        let (layer_moments, head_moments) = match mode {
            OptimizerMode::Sgd => (Vec::new(), None),
            OptimizerMode::Adam => (
                model.layers().map(|p| AdamMoments::new(p.param_len())).collect(),
                Some(AdamMoments::new(model.head.data().len())),
            ),
        };
        OptimizerState { mode, lr, layer_moments, head_moments }
    }

    fn step(&mut self, slot: Option<usize>, grad: &[f64]) -> Vec<f64> {
        match self.mode {
            OptimizerMode::Sgd => grad.iter().map(|g| -self.lr * g).collect(),
            OptimizerMode::Adam => {
                let lr = self.lr;
                let moments = match slot {
                    Some(l) => &mut self.layer_moments[l],
                    None => self.head_moments.as_mut().expect("adam state has head moments"),
                };
                moments.direction(grad, lr)
            }
        }
    }
}

fn add_checked(params: &[f64], delta: &[f64], what: &str) -> Result<Vec<f64>> {
    let out: Vec<f64> = params.iter().zip(delta).map(|(p, d)| p + d).collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(MasmError::NonFinite(format!("update of {what}")))
    }
}

/// `theta <- theta + M d` per layer; the head is always updated. Masked
/// layers keep parameters and optimizer moments bit-for-bit.
pub fn apply_update(model: &mut Model, grads: &Gradients, mask: &LayerMask, opt: &mut OptimizerState) -> Result<()> {
    let n = model.n_layers();
    if mask.bits.len() != n || grads.layers.len() != n {
        return Err(MasmError::Shape(format!(
            "mask has {} bits and {} layer gradients for {n} layers",
            mask.bits.len(),
            grads.layers.len()
        )));
    }
    for l in (0..n).filter(|&l| mask.bits[l]) {
        let params = model.layer(l).flat_params();
        if params.len() != grads.layers[l].len() {
            return Err(MasmError::Shape(format!("layer {l} gradient length")));
        }
        let delta = opt.step(Some(l), &grads.layers[l]);
        let next = add_checked(&params, &delta, &format!("layer {l}"))?;
        model.layer_mut(l).set_flat_params(&next)?;
    }
    let delta = opt.step(None, &grads.head);
    let next = add_checked(model.head.data(), &delta, "head")?;
    model.head.data_mut().copy_from_slice(&next);
    Ok(())
}
