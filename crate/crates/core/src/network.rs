//! Miniature pre-norm attention classifier with hand-written backprop.
//!
//! Per block: `x += Attn(LN1(x))`, `x += MLP(LN2(x))`, single-head attention
//! and a tanh-GELU MLP without biases. Token outputs are mean-pooled and fed
//! to a linear head whose last column is a bias. One head row means a binary
//! detector (sigmoid); more rows mean multiclass (softmax).
//!
//! The q, k, v, o projections of every block are the adaptable layers; layer
//! `l = 4 * block + j` with `j` in q, k, v, o order.

use serde::{Deserialize, Serialize};

use crate::error::{MasmError, Result};
use crate::losses::{self, clamp_prob, LossReport, LossWeights, P_MIN};
use crate::subspace::{decompose, DecomposedLayer, DecompositionConfig};
use crate::tensor::{Matrix, Rng};

pub const LN_EPS: f64 = 1e-5;
pub const PROJ_NAMES: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_tokens: usize,
    pub d_ff: usize,
    pub n_classes_pretrain: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_model: 16, n_blocks: 6, n_tokens: 8, d_ff: 32, n_classes_pretrain: 4 }
    }
}

impl ModelConfig {
    /// Number of adaptable projections.
    pub fn n_layers(&self) -> usize {
        4 * self.n_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_blocks == 0 || self.n_tokens == 0 || self.d_ff == 0 {
            return Err(MasmError::Config("model dimensions must be >= 1".into()));
        }
        if self.n_classes_pretrain < 2 {
            return Err(MasmError::Config("n_classes_pretrain must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm { gamma: vec![1.0; d], beta: vec![0.0; d] }
    }
}

/// An adaptable projection: plain dense weight, or SVD-decomposed.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Dense(Matrix),
    Decomposed(DecomposedLayer),
}

impl Projection {
    pub fn effective(&self) -> Result<Matrix> {
        match self {
            Projection::Dense(w) => Ok(w.clone()),
            Projection::Decomposed(l) => l.recompose(),
        }
    }

    pub fn param_len(&self) -> usize {
        match self {
            Projection::Dense(w) => w.data().len(),
            Projection::Decomposed(l) => l.param_len(),
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            Projection::Dense(w) => w.data().to_vec(),
            Projection::Decomposed(l) => l.flat_params(),
        }
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            Projection::Dense(w) if w.data().len() == flat.len() => {
                w.data_mut().copy_from_slice(flat);
                Ok(())
            }
            Projection::Dense(w) => {
                Err(MasmError::Shape(format!("dense layer holds {} values, got {}", w.data().len(), flat.len())))
            }
            Projection::Decomposed(l) => l.set_flat_params(flat),
        }
    }

    pub fn as_decomposed(&self) -> Option<&DecomposedLayer> {
        match self {
            Projection::Decomposed(l) => Some(l),
            Projection::Dense(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    /// q, k, v, o; each `d_model x d_model`.
    pub proj: [Projection; 4],
    pub ln2: LayerNorm,
    /// `d_ff x d_model`.
    pub mlp_in: Matrix,
    /// `d_model x d_ff`.
    pub mlp_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Input map `d_model x d_model`, applied as `x E^T`.
    pub token_embed: Matrix,
    pub blocks: Vec<Block>,
    /// `n_out x (d_model + 1)`; last column is the bias.
    pub head: Matrix,
}

/// Which gradients [`backward`] produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Adaptable projections and head only.
    Trainable,
    /// Every parameter, for pretraining.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Flattened per adaptable layer, in each projection's parameter order.
    pub layers: Vec<Vec<f64>>,
    pub head: Vec<f64>,
    /// Non-adaptable groups in [`Model::frozen_groups_mut`] order, for `GradScope::Full`.
    pub frozen: Option<Vec<Vec<f64>>>,
}

/// One mini-batch. `labels` hold 0/1 for the binary head or class ids for pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub inputs: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub clip_ids: Vec<u64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f64>>,
    /// Sigmoid of the single logit for binary heads, softmax otherwise.
    pub probs: Vec<Vec<f64>>,
}

impl ForwardOutput {
    /// Fake-class probability per sample (binary heads).
    pub fn fake_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p[0]).collect()
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|p| {
                if p.len() == 1 {
                    usize::from(p[0] >= 0.5)
                } else {
                    (0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best })
                }
            })
            .collect()
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.normal())
}

impl Model {
    /// Freshly initialized model with a multiclass head for pretraining.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let d = config.d_model;
        let s = 1.0 / (d as f64).sqrt();
        let mut token_embed = random_matrix(d, d, 0.1 * s, rng);
        for i in 0..d {
            token_embed[(i, i)] += 1.0;
        }
        let blocks = (0..config.n_blocks)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                proj: std::array::from_fn(|_| Projection::Dense(random_matrix(d, d, s, rng))),
                ln2: LayerNorm::new(d),
                mlp_in: random_matrix(config.d_ff, d, s, rng),
                mlp_out: random_matrix(d, config.d_ff, 0.5 / (config.d_ff as f64).sqrt(), rng),
            })
            .collect();
        let head = random_matrix(config.n_classes_pretrain, d + 1, s, rng);
        Ok(Model { config, token_embed, blocks, head })
    }

    pub fn n_layers(&self) -> usize {
        4 * self.blocks.len()
    }

    pub fn layer(&self, l: usize) -> &Projection {
        &self.blocks[l / 4].proj[l % 4]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Projection {
        &mut self.blocks[l / 4].proj[l % 4]
    }

    pub fn layers(&self) -> impl Iterator<Item = &Projection> {
        self.blocks.iter().flat_map(|b| b.proj.iter())
    }

    pub fn decomposed_layers(&self) -> Vec<&DecomposedLayer> {
        self.layers().filter_map(Projection::as_decomposed).collect()
    }

    /// Replaces every dense projection by its SVD decomposition.
    pub fn decompose_attention(&mut self, cfg: &DecompositionConfig) -> Result<()> {
        for l in 0..self.n_layers() {
            if let Projection::Dense(w) = self.layer(l) {
                let dec = decompose(w, cfg, l)?;
                *self.layer_mut(l) = Projection::Decomposed(dec);
            }
        }
        Ok(())
    }

    /// New binary detection head.
    pub fn reset_binary_head(&mut self, rng: &mut Rng) {
        let d = self.config.d_model;
        self.head = random_matrix(1, d + 1, 0.1 / (d as f64).sqrt(), rng);
        self.head[(0, d)] = 0.0;
    }

    pub fn is_binary(&self) -> bool {
        self.head.rows() == 1
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers().map(Projection::param_len).sum::<usize>() + self.head.data().len()
    }

    /// Parameters that are frozen during fine-tuning, in a fixed order.
    pub fn frozen_groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.token_embed.data_mut()];
        for b in &mut self.blocks {
            out.push(&mut b.ln1.gamma);
            out.push(&mut b.ln1.beta);
            out.push(&mut b.ln2.gamma);
            out.push(&mut b.ln2.beta);
            out.push(b.mlp_in.data_mut());
            out.push(b.mlp_out.data_mut());
        }
        out
    }

    pub fn frozen_groups(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.token_embed.data()];
        for b in &self.blocks {
            out.extend([&b.ln1.gamma[..], &b.ln1.beta, &b.ln2.gamma, &b.ln2.beta]);
            out.push(b.mlp_in.data());
            out.push(b.mlp_out.data());
        }
        out
    }

    fn effective_weights(&self) -> Result<Vec<[Matrix; 4]>> {
        self.blocks
            .iter()
            .map(|b| {
                Ok([b.proj[0].effective()?, b.proj[1].effective()?, b.proj[2].effective()?, b.proj[3].effective()?])
            })
            .collect()
    }
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, ln: &LayerNorm) -> (Matrix, LnCache) {
    let (t, d) = x.shape();
    let mut y = Matrix::zeros(t, d);
    let mut xhat = Matrix::zeros(t, d);
    let mut inv_std = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[(i, j)] = xh;
            y[(i, j)] = ln.gamma[j] * xh + ln.beta[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns dx and accumulates dgamma/dbeta when given.
fn layer_norm_backward(dy: &Matrix, ln: &LayerNorm, cache: &LnCache, dparams: Option<(&mut [f64], &mut [f64])>) -> Matrix {
    let (t, d) = dy.shape();
    let mut dx = Matrix::zeros(t, d);
    for i in 0..t {
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            let dxh = dy[(i, j)] * ln.gamma[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * cache.xhat[(i, j)];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for j in 0..d {
            let dxh = dy[(i, j)] * ln.gamma[j];
            dx[(i, j)] = cache.inv_std[i] * (dxh - mean_dxh - cache.xhat[(i, j)] * mean_dxh_xh);
        }
    }
    if let Some((dg, db)) = dparams {
        for i in 0..t {
            for j in 0..d {
                dg[j] += dy[(i, j)] * cache.xhat[(i, j)];
                db[j] += dy[(i, j)];
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(s: &Matrix) -> Matrix {
    let mut out = s.clone();
    for i in 0..s.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

struct BlockCache {
    ln1: LnCache,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
    z: Matrix,
    ln2: LnCache,
    h2: Matrix,
    pre: Matrix,
    act: Matrix,
}

struct SampleCache {
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

fn sample_forward(model: &Model, weights: &[[Matrix; 4]], input: &Matrix) -> Result<SampleCache> {
    let cfg = &model.config;
    if input.shape() != (cfg.n_tokens, cfg.d_model) {
        return Err(MasmError::Shape(format!(
            "sample is {:?}, model expects {}x{}",
            input.shape(),
            cfg.n_tokens,
            cfg.d_model
        )));
    }
    let scale = 1.0 / (cfg.d_model as f64).sqrt();
    let mut x = input.matmul_t(&model.token_embed);
    let mut caches = Vec::with_capacity(model.blocks.len());
    for (bi, (block, w)) in model.blocks.iter().zip(weights).enumerate() {
        let (h1, ln1) = layer_norm(&x, &block.ln1);
        let q = h1.matmul_t(&w[0]);
        let k = h1.matmul_t(&w[1]);
        let v = h1.matmul_t(&w[2]);
        let attn = softmax_rows(&q.matmul_t(&k).scaled(scale));
        let z = attn.matmul(&v);
        x.add_assign(&z.matmul_t(&w[3]));
        let (h2, ln2) = layer_norm(&x, &block.ln2);
        let pre = h2.matmul_t(&block.mlp_in);
        let act = Matrix::from_fn(pre.rows(), pre.cols(), |i, j| gelu(pre[(i, j)]));
        x.add_assign(&act.matmul_t(&block.mlp_out));
        if !x.is_finite() {
            return Err(MasmError::Activation { block: bi });
        }
        caches.push(BlockCache { ln1, h1, q, k, v, attn, z, ln2, h2, pre, act });
    }
    let t = cfg.n_tokens as f64;
    let pooled: Vec<f64> = (0..cfg.d_model).map(|j| (0..cfg.n_tokens).map(|i| x[(i, j)]).sum::<f64>() / t).collect();
    let logits = head_logits(&model.head, &pooled);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(MasmError::NonFinite("head logits".into()));
    }
    Ok(SampleCache { blocks: caches, pooled, logits })
}

fn head_logits(head: &Matrix, pooled: &[f64]) -> Vec<f64> {
    let d = pooled.len();
    (0..head.rows())
        .map(|c| {
            let row = head.row(c);
            row[..d].iter().zip(pooled).map(|(a, b)| a * b).sum::<f64>() + row[d]
        })
        .collect()
}

fn probs_from_logits(logits: &[f64]) -> Vec<f64> {
    if logits.len() == 1 {
        vec![sigmoid(logits[0])]
    } else {
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn forward(model: &Model, inputs: &[Matrix]) -> Result<ForwardOutput> {
    let weights = model.effective_weights()?;
    let mut logits = Vec::with_capacity(inputs.len());
    let mut probs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let cache = sample_forward(model, &weights, input)?;
        probs.push(probs_from_logits(&cache.logits));
        logits.push(cache.logits);
    }
    Ok(ForwardOutput { logits, probs })
}

/// Mean-pooled final token representations, one vector per sample.
pub fn pooled_features(model: &Model, inputs: &[Matrix]) -> Result<Vec<Vec<f64>>> {
    let weights = model.effective_weights()?;
    inputs.iter().map(|x| Ok(sample_forward(model, &weights, x)?.pooled)).collect()
}

/// Classification loss of a forward pass: binary cross-entropy for binary
/// heads, categorical cross-entropy otherwise.
pub fn classification_loss(out: &ForwardOutput, labels: &[usize]) -> Result<f64> {
    if out.probs.first().is_some_and(|p| p.len() == 1) {
        let y: Vec<u8> = labels.iter().map(|&l| l.min(255) as u8).collect();
        losses::cls_loss(&out.fake_probs(), &y)
    } else {
        if labels.is_empty() || labels.len() != out.probs.len() {
            return Err(MasmError::Shape("labels do not match batch".into()));
        }
        let mut acc = 0.0;
        for (p, &y) in out.probs.iter().zip(labels) {
            let py = p.get(y).ok_or_else(|| MasmError::Shape(format!("class {y} outside head")))?;
            acc -= clamp_prob(*py).ln();
        }
        Ok(acc / labels.len() as f64)
    }
}

/// Full objective: classification plus the weighted mean regularizers over
/// decomposed layers.
pub fn objective(model: &Model, batch: &TrainBatch, weights: &LossWeights) -> Result<LossReport> {
    let out = forward(model, &batch.inputs)?;
    let cls = classification_loss(&out, &batch.labels)?;
    losses::total_loss(cls, &model.decomposed_layers(), weights)
}

fn check_labels(model: &Model, batch: &TrainBatch) -> Result<()> {
    if batch.is_empty() || batch.labels.len() != batch.len() {
        return Err(MasmError::Shape("batch must be non-empty with one label per sample".into()));
    }
    let n_out = if model.is_binary() { 2 } else { model.head.rows() };
    if let Some(bad) = batch.labels.iter().find(|&&y| y >= n_out) {
        return Err(MasmError::Shape(format!("label {bad} out of range for {n_out} classes")));
    }
    Ok(())
}

/// Analytic gradients of [`objective`].
pub fn backward(model: &Model, batch: &TrainBatch, weights: &LossWeights, scope: GradScope) -> Result<(LossReport, Gradients)> {
    check_labels(model, batch)?;
    let cfg = &model.config;
    let (d, t) = (cfg.d_model, cfg.n_tokens);
    let n = batch.len() as f64;
    let eff = model.effective_weights()?;
    let full = scope == GradScope::Full;

    let mut d_eff: Vec<[Matrix; 4]> =
        eff.iter().map(|w| std::array::from_fn(|j| Matrix::zeros(w[j].rows(), w[j].cols()))).collect();
    let mut d_head = Matrix::zeros(model.head.rows(), model.head.cols());
    let mut d_embed = Matrix::zeros(d, d);
    let mut d_blocks: Vec<[Vec<f64>; 4]> = model.blocks.iter().map(|_| std::array::from_fn(|_| vec![0.0; d])).collect();
    let mut d_mlp: Vec<(Matrix, Matrix)> = model
        .blocks
        .iter()
        .map(|b| (Matrix::zeros(b.mlp_in.rows(), b.mlp_in.cols()), Matrix::zeros(b.mlp_out.rows(), b.mlp_out.cols())))
        .collect();

    let mut probs = Vec::with_capacity(batch.len());
    let scale = 1.0 / (d as f64).sqrt();
    for (input, &label) in batch.inputs.iter().zip(&batch.labels) {
        let cache = sample_forward(model, &eff, input)?;
        let p = probs_from_logits(&cache.logits);
        let dz: Vec<f64> = if p.len() == 1 {
            let pc = p[0];
            if !(P_MIN..=1.0 - P_MIN).contains(&pc) {
                vec![0.0]
            } else {
                vec![(pc - label as f64) / n]
            }
        } else if !(P_MIN..=1.0 - P_MIN).contains(&p[label]) {
            vec![0.0; p.len()]
        } else {
            p.iter().enumerate().map(|(c, &pc)| (pc - f64::from(u8::from(c == label))) / n).collect()
        };
        probs.push(p);

        let mut d_pooled = vec![0.0; d];
        for (c, &g) in dz.iter().enumerate() {
            let row = model.head.row(c);
            for j in 0..d {
                d_head[(c, j)] += g * cache.pooled[j];
                d_pooled[j] += g * row[j];
            }
            d_head[(c, d)] += g;
        }
        let mut dx = Matrix::from_fn(t, d, |_, j| d_pooled[j] / t as f64);

        for bi in (0..model.blocks.len()).rev() {
            let block = &model.blocks[bi];
            let bc = &cache.blocks[bi];
            let w = &eff[bi];

            // MLP branch
            let d_act = dx.matmul(&block.mlp_out);
            if full {
                d_mlp[bi].1.add_assign(&dx.t_matmul(&bc.act));
            }
            let d_pre = Matrix::from_fn(d_act.rows(), d_act.cols(), |i, j| d_act[(i, j)] * gelu_grad(bc.pre[(i, j)]));
            if full {
                d_mlp[bi].0.add_assign(&d_pre.t_matmul(&bc.h2));
            }
            let d_h2 = d_pre.matmul(&block.mlp_in);
            let [g1, b1, g2, b2] = &mut d_blocks[bi];
            let dln2 = layer_norm_backward(&d_h2, &block.ln2, &bc.ln2, full.then_some((g2.as_mut_slice(), b2.as_mut_slice())));
            dx.add_assign(&dln2);

            // attention branch
            d_eff[bi][3].add_assign(&dx.t_matmul(&bc.z));
            let d_z = dx.matmul(&w[3]);
            let d_attn = d_z.matmul_t(&bc.v);
            let d_v = bc.attn.t_matmul(&d_z);
            let mut d_s = Matrix::zeros(t, t);
            for i in 0..t {
                let inner: f64 = (0..t).map(|j| d_attn[(i, j)] * bc.attn[(i, j)]).sum();
                for j in 0..t {
                    d_s[(i, j)] = bc.attn[(i, j)] * (d_attn[(i, j)] - inner) * scale;
                }
            }
            let d_q = d_s.matmul(&bc.k);
            let d_k = d_s.t_matmul(&bc.q);
            d_eff[bi][0].add_assign(&d_q.t_matmul(&bc.h1));
            d_eff[bi][1].add_assign(&d_k.t_matmul(&bc.h1));
            d_eff[bi][2].add_assign(&d_v.t_matmul(&bc.h1));
            let mut d_h1 = d_q.matmul(&w[0]);
            d_h1.add_assign(&d_k.matmul(&w[1]));
            d_h1.add_assign(&d_v.matmul(&w[2]));
            let dln1 = layer_norm_backward(&d_h1, &block.ln1, &bc.ln1, full.then_some((g1.as_mut_slice(), b1.as_mut_slice())));
            dx.add_assign(&dln1);
        }
        if full {
            d_embed.add_assign(&dx.t_matmul(input));
        }
    }

    let cls = classification_loss(&ForwardOutput { logits: Vec::new(), probs }, &batch.labels)?;
    let decomposed = model.decomposed_layers();
    let n_dec = decomposed.len();
    let report = losses::total_loss(cls, &decomposed, weights)?;

    let mut layers = Vec::with_capacity(model.n_layers());
    for l in 0..model.n_layers() {
        let dw = &mut d_eff[l / 4][l % 4];
        match model.layer(l) {
            Projection::Dense(_) => layers.push(dw.data().to_vec()),
            Projection::Decomposed(dec) => {
                let reg = 1.0 / n_dec as f64;
                if weights.lambda_spec != 0.0 {
                    let g = losses::spec_weight_grad(dec, &eff[l / 4][l % 4])?;
                    dw.add_scaled(&g, weights.lambda_spec * reg);
                }
                let mut flat = dec.factor_grads(dw);
                if weights.lambda_orth != 0.0 {
                    let mut off = 0;
                    for (a, (du, dv)) in dec.artifacts.iter().zip(losses::orth_grads(dec)) {
                        let c = weights.lambda_orth * reg;
                        for (dst, src) in flat[off..off + du.data().len()].iter_mut().zip(du.data()) {
                            *dst += c * src;
                        }
                        off += du.data().len() + a.s.len();
                        for (dst, src) in flat[off..off + dv.data().len()].iter_mut().zip(dv.data()) {
                            *dst += c * src;
                        }
                        off += dv.data().len();
                    }
                }
                layers.push(flat);
            }
        }
    }

    let frozen = full.then(|| {
        let mut groups = vec![d_embed.into_vec()];
        for (bp, (mi, mo)) in d_blocks.into_iter().zip(d_mlp) {
            let [g1, b1, g2, b2] = bp;
            groups.extend([g1, b1, g2, b2, mi.into_vec(), mo.into_vec()]);
        }
        groups
    });
    Ok((report, Gradients { layers, head: d_head.into_vec(), frozen }))
}

/// Location of a trainable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamCoord {
    Layer { layer: usize, index: usize },
    Head { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<ParamCoord>,
    pub coords_checked: usize,
    pub passed: bool,
    /// Coordinates above tolerance, with (analytic, numeric, relative error).
    pub failures: Vec<(ParamCoord, f64, f64, f64)>,
    pub warnings: Vec<String>,
}

/// Floor on the relative-error denominator, so coordinates whose true
/// gradient is ~0 are judged against finite-difference round-off rather
/// than amplifying it.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares analytic gradients of every trainable scalar against central
/// differences of [`objective`].
pub fn grad_check(model: &Model, batch: &TrainBatch, weights: &LossWeights, h: f64, tol: f64) -> Result<GradCheckReport> {
    let (_, grads) = backward(model, batch, weights, GradScope::Trainable)?;
    grad_check_against(model, batch, weights, &grads, h, tol)
}

/// Like [`grad_check`] but against caller-supplied analytic gradients.
pub fn grad_check_against(
    model: &Model,
    batch: &TrainBatch,
    weights: &LossWeights,
    grads: &Gradients,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut warnings = Vec::new();
    if h > 1e-3 {
        warnings.push(format!("step h = {h:e} is large; truncation error may dominate"));
    }
    if model.trainable_param_count() > 10_000 {
        warnings.push(format!("{} trainable scalars; grad check is meant for tiny models", model.trainable_param_count()));
    }
    let mut work = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        passed: true,
        failures: Vec::new(),
        warnings,
    };
    let mut record = |coord: ParamCoord, a: f64, num: f64| {
        let e = relative_error(a, num);
        report.coords_checked += 1;
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some(coord);
        }
        if e > tol {
            report.failures.push((coord, a, num, e));
        }
    };

    for l in 0..model.n_layers() {
        let base = model.layer(l).flat_params();
        for (i, &a) in grads.layers[l].iter().enumerate() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            work.layer_mut(l).set_flat_params(&p)?;
            let up = objective(&work, batch, weights)?.total;
            p[i] = base[i] - h;
            work.layer_mut(l).set_flat_params(&p)?;
            let down = objective(&work, batch, weights)?.total;
            work.layer_mut(l).set_flat_params(&base)?;
            record(ParamCoord::Layer { layer: l, index: i }, a, (up - down) / (2.0 * h));
        }
    }
    for (i, &a) in grads.head.iter().enumerate() {
        let orig = work.head.data()[i];
        work.head.data_mut()[i] = orig + h;
        let up = objective(&work, batch, weights)?.total;
        work.head.data_mut()[i] = orig - h;
        let down = objective(&work, batch, weights)?.total;
        work.head.data_mut()[i] = orig;
        record(ParamCoord::Head { index: i }, a, (up - down) / (2.0 * h));
    }
    report.passed = report.failures.is_empty();
    Ok(report)
}

/// Evaluation helper: fake probabilities for a set of samples.
pub fn predict(model: &Model, inputs: &[Matrix]) -> Result<Vec<f64>> {
    Ok(forward(model, inputs)?.fake_probs())
}
