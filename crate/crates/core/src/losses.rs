//! Classification loss and the two subspace regularizers.

use serde::{Deserialize, Serialize};

use crate::error::{MasmError, Result};
use crate::subspace::DecomposedLayer;
use crate::tensor::{frobenius_sq, Matrix};

/// Probabilities are clamped to `[P_MIN, 1 - P_MIN]` before taking logs.
pub const P_MIN: f64 = 1e-12;

/// Relative band around the pretrained energy inside which the spectral
/// penalty is treated as sitting at its kink (subgradient 0).
pub const SPEC_DEADBAND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_orth: f64,
    pub lambda_spec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_orth: 1.0, lambda_spec: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_orth >= 0.0 && self.lambda_spec >= 0.0 {
            Ok(())
        } else {
            Err(MasmError::Config("loss weights must be >= 0".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub orth_mean: f64,
    pub spec_mean: f64,
    pub total: f64,
    pub n: usize,
}

fn pair_scale(k: usize) -> f64 {
    2.0 / (k as f64 * (k as f64 - 1.0))
}

/// Mean cross-Gram energy between artifact subspaces, over unordered pairs.
///
/// The right factors are stored with singular vectors as columns (`d_in x r_k`),
/// so the row-vector product `V_i V_j^T` is computed here as `V_i^T V_j`.
pub fn orth_loss(layer: &DecomposedLayer) -> f64 {
    let k = layer.k();
    if k < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let (a, b) = (&layer.artifacts[i], &layer.artifacts[j]);
            acc += sq_norm(&a.v.t_matmul(&b.v)) + sq_norm(&a.u.t_matmul(&b.u));
        }
    }
    pair_scale(k) * acc
}

/// Gradients of [`orth_loss`] with respect to each `(U_k, V_k)`.
pub fn orth_grads(layer: &DecomposedLayer) -> Vec<(Matrix, Matrix)> {
    let k = layer.k();
    let mut grads: Vec<(Matrix, Matrix)> = layer
        .artifacts
        .iter()
        .map(|a| (Matrix::zeros(a.u.rows(), a.u.cols()), Matrix::zeros(a.v.rows(), a.v.cols())))
        .collect();
    if k < 2 {
        return grads;
    }
    let c = 2.0 * pair_scale(k);
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let (ai, aj) = (&layer.artifacts[i], &layer.artifacts[j]);
            // d/dU_i ||U_i^T U_j||^2 = 2 U_j (U_j^T U_i)
            grads[i].0.add_scaled(&aj.u.matmul(&aj.u.t_matmul(&ai.u)), c);
            grads[i].1.add_scaled(&aj.v.matmul(&aj.v.t_matmul(&ai.v)), c);
        }
    }
    grads
}

fn sq_norm(m: &Matrix) -> f64 {
    m.data().iter().map(|x| x * x).sum()
}

/// `| ||W_hat||_F^2 - ||W||_F^2 |`.
pub fn spec_loss(layer: &DecomposedLayer) -> Result<f64> {
    Ok((frobenius_sq(&layer.recompose()?)? - layer.pretrained_frob_sq()).abs())
}

/// Gradient of [`spec_loss`] with respect to the effective weight.
pub fn spec_weight_grad(layer: &DecomposedLayer, effective: &Matrix) -> Result<Matrix> {
    let e0 = layer.pretrained_frob_sq();
    let diff = frobenius_sq(effective)? - e0;
    if diff.abs() <= SPEC_DEADBAND * e0.max(1.0) {
        return Ok(Matrix::zeros(effective.rows(), effective.cols()));
    }
    Ok(effective.scaled(2.0 * diff.signum()))
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(P_MIN, 1.0 - P_MIN)
}

/// Mean binary cross-entropy of fake-class probabilities against labels in {0, 1}.
pub fn cls_loss(p: &[f64], y: &[u8]) -> Result<f64> {
    if p.is_empty() {
        return Err(MasmError::Shape("classification loss over an empty batch".into()));
    }
    if p.len() != y.len() {
        return Err(MasmError::Shape(format!("{} probabilities vs {} labels", p.len(), y.len())));
    }
    let mut acc = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = clamp_prob(pi);
        acc += match yi {
            1 => pc.ln(),
            0 => (1.0 - pc).ln(),
            other => return Err(MasmError::Shape(format!("label {other} outside {{0, 1}}"))),
        };
    }
    Ok(-acc / p.len() as f64)
}

/// Combines the classification loss with the per-layer regularizer means.
pub fn total_loss(cls: f64, layers: &[&DecomposedLayer], weights: &LossWeights) -> Result<LossReport> {
    let n = layers.len();
    if n == 0 {
        return Ok(LossReport { cls, orth_mean: 0.0, spec_mean: 0.0, total: cls, n });
    }
    let orth_mean = layers.iter().map(|l| orth_loss(l)).sum::<f64>() / n as f64;
    let mut spec_sum = 0.0;
    for l in layers {
        spec_sum += spec_loss(l)?;
    }
    let spec_mean = spec_sum / n as f64;
    Ok(report(cls, orth_mean, spec_mean, n, weights))
}

pub fn report(cls: f64, orth_mean: f64, spec_mean: f64, n: usize, weights: &LossWeights) -> LossReport {
    let total = cls + weights.lambda_orth * orth_mean + weights.lambda_spec * spec_mean;
    LossReport { cls, orth_mean, spec_mean, total, n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::{decompose, DecompositionConfig, RankPolicy};
    use crate::tensor::Rng;

    fn random_layer(seed: u64, k: usize) -> DecomposedLayer {
        let mut rng = Rng::new(seed);
        let w = Matrix::from_fn(8, 8, |_, _| rng.normal());
        decompose(&w, &DecompositionConfig { rank_policy: RankPolicy::Fixed(2), k }, 0).unwrap()
    }

    #[test]
    fn regularizers_vanish_at_init() {
        for seed in 0..5 {
            let layer = random_layer(seed, 3);
            assert!(orth_loss(&layer) <= 1e-18);
            assert!(spec_loss(&layer).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn copied_left_factor_gives_unit_orth_loss() {
        let w = Matrix::from_diag(&[5.0, 3.0, 2.0, 1.0]);
        let cfg = DecompositionConfig { rank_policy: RankPolicy::Fixed(2), k: 2 };
        let mut layer = decompose(&w, &cfg, 0).unwrap();
        layer.artifacts[1].u = layer.artifacts[0].u.clone();
        assert!((orth_loss(&layer) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_subspace_has_zero_orth_loss() {
        let mut layer = random_layer(1, 1);
        layer.artifacts[0].u = layer.artifacts[0].u.scaled(3.0);
        assert_eq!(orth_loss(&layer), 0.0);
    }

    #[test]
    fn orth_loss_symmetric_under_reordering() {
        let mut layer = random_layer(5, 4);
        let mut rng = Rng::new(50);
        for a in &mut layer.artifacts {
            a.u.data_mut().iter_mut().for_each(|x| *x += 0.1 * rng.normal());
            a.v.data_mut().iter_mut().for_each(|x| *x += 0.1 * rng.normal());
        }
        let before = orth_loss(&layer);
        layer.artifacts.reverse();
        layer.artifacts.swap(0, 2);
        assert!((orth_loss(&layer) - before).abs() <= 1e-14 * before.max(1.0));
    }

    #[test]
    fn singular_value_two_to_three_costs_five() {
        let w = Matrix::from_diag(&[4.0, 2.0, 1.0]);
        let cfg = DecompositionConfig { rank_policy: RankPolicy::Fixed(1), k: 2 };
        let mut layer = decompose(&w, &cfg, 0).unwrap();
        layer.artifacts[0].s[0] = 3.0;
        assert!((spec_loss(&layer).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zeroed_tail_costs_tail_energy() {
        let layer0 = random_layer(9, 3);
        let tail: f64 = layer0.artifacts.iter().flat_map(|a| a.s.iter()).map(|s| s * s).sum();
        let mut layer = layer0.clone();
        layer.artifacts.iter_mut().for_each(|a| a.s.iter_mut().for_each(|s| *s = 0.0));
        assert!((spec_loss(&layer).unwrap() - tail).abs() <= 1e-9 * tail);
    }

    #[test]
    fn spec_loss_rotation_invariant() {
        // rotating U_k and V_k by the same orthogonal matrix while keeping s
        // equal across the block leaves W_hat unchanged
        let w = Matrix::from_diag(&[6.0, 3.0, 2.0, 2.0, 1.0]);
        let cfg = DecompositionConfig { rank_policy: RankPolicy::Fixed(2), k: 1 };
        let mut layer = decompose(&w, &cfg, 0).unwrap();
        layer.artifacts[0].s = vec![2.5, 2.5, 2.5];
        let before = spec_loss(&layer).unwrap();
        let (c, s) = (0.6f64, 0.8f64);
        let rot = Matrix::from_rows(&[vec![c, -s, 0.0], vec![s, c, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        layer.artifacts[0].u = layer.artifacts[0].u.matmul(&rot);
        layer.artifacts[0].v = layer.artifacts[0].v.matmul(&rot);
        assert!((spec_loss(&layer).unwrap() - before).abs() < 1e-12);
    }

    #[test]
    fn spec_grad_zero_at_init() {
        let layer = random_layer(3, 2);
        let w = layer.recompose().unwrap();
        assert_eq!(spec_weight_grad(&layer, &w).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn cls_examples() {
        assert!((cls_loss(&[0.5, 0.5], &[1, 0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cls_loss(&[1.0, 0.0], &[1, 0]).unwrap() <= 1e-11);
        let v = cls_loss(&[0.9, 0.2], &[1, 0]).unwrap();
        assert!((v - 0.164_252_033_486_018).abs() < 1e-12);
        assert!(cls_loss(&[], &[]).is_err());
    }

    #[test]
    fn total_examples() {
        let layer = random_layer(2, 2);
        let r = total_loss(0.4, &[&layer], &LossWeights { lambda_orth: 0.0, lambda_spec: 0.0 }).unwrap();
        assert_eq!(r.total, 0.4);
        let r = report(0.5, 0.1, 0.2, 3, &LossWeights::default());
        assert!((r.total - 0.8).abs() < 1e-12);
    }
}
