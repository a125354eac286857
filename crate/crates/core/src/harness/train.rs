//! Pretraining, fine-tuning and evaluation loops.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Stage};
use super::config::TrainConfig;
use crate::data::{SyntheticSample, Splits};
use crate::error::{MasmError, Result};
use crate::metrics::{summarize, video_level, Pooling, ScoredSet};
use crate::network::{backward, forward, predict, GradScope, Model, TrainBatch};
use crate::slm::{apply_update, build_mask, AdamMoments, GradientStats, LayerMask, MaskPolicy, OptimizerState, StatsConfig};
use crate::tensor::{stable_hash, Rng};

pub fn detection_batch(samples: &[SyntheticSample], idx: &[usize]) -> TrainBatch {
    TrainBatch {
        inputs: idx.iter().map(|&i| samples[i].tokens.clone()).collect(),
        labels: idx.iter().map(|&i| usize::from(samples[i].label)).collect(),
        clip_ids: idx.iter().map(|&i| samples[i].clip_id).collect(),
    }
}

pub fn class_batch(samples: &[SyntheticSample], idx: &[usize]) -> TrainBatch {
    TrainBatch { labels: idx.iter().map(|&i| samples[i].base_class).collect(), ..detection_batch(samples, idx) }
}

/// Shuffled mini-batches covering every index once; the last may be short.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn iterations_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Base-class accuracy of a multiclass model.
pub fn accuracy(model: &Model, samples: &[SyntheticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MasmError::Shape("accuracy over an empty set".into()));
    }
    let inputs: Vec<_> = samples.iter().map(|s| s.tokens.clone()).collect();
    let pred = forward(model, &inputs)?.argmax();
    let hits = pred.iter().zip(samples).filter(|(p, s)| **p == s.base_class).count();
    Ok(hits as f64 / samples.len() as f64)
}

struct FullAdam {
    layers: Vec<AdamMoments>,
    head: AdamMoments,
    frozen: Vec<AdamMoments>,
}

impl FullAdam {
    fn new(model: &Model) -> Self {
        FullAdam {
            layers: model.layers().map(|p| AdamMoments::new(p.param_len())).collect(),
            head: AdamMoments::new(model.head.data().len()),
            frozen: model.frozen_groups().iter().map(|g| AdamMoments::new(g.len())).collect(),
        }
    }
}

fn add_delta(params: &mut [f64], delta: &[f64]) -> Result<()> {
    for (p, d) in params.iter_mut().zip(delta) {
        *p += d;
    }
    if params.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MasmError::NonFinite("pretraining update".into()))
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub test_accuracy: f64,
    pub epochs_run: usize,
}

/// Trains every parameter of a fresh model on base classes until the test
/// accuracy reaches the configured floor or the epoch cap runs out.
pub fn run_pretrain(cfg: &TrainConfig, splits: &Splits) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let pc = cfg.pretrain;
    let mut rng = Rng::new(cfg.seed.wrapping_add(stable_hash("pretrain")));
    let mut model = Model::init(cfg.model, &mut rng)?;
    let mut adam = FullAdam::new(&model);
    let train = &splits.pretrain_train;
    let mut step = 0u64;
    let mut epochs_run = 0;
    let mut acc = accuracy(&model, &splits.pretrain_test)?;
    for _ in 0..pc.epochs {
        for idx in epoch_batches(train.len(), pc.batch_size, &mut rng) {
            let batch = class_batch(train, &idx);
            let (_, grads) = backward(&model, &batch, &cfg.weights, GradScope::Full)?;
            for l in 0..model.n_layers() {
                let mut p = model.layer(l).flat_params();
                add_delta(&mut p, &adam.layers[l].direction(&grads.layers[l], pc.lr))?;
                model.layer_mut(l).set_flat_params(&p)?;
            }
            let delta = adam.head.direction(&grads.head, pc.lr);
            add_delta(model.head.data_mut(), &delta)?;
            let frozen = grads.frozen.as_ref().expect("full scope returns frozen gradients");
            for ((params, g), moments) in model.frozen_groups_mut().into_iter().zip(frozen).zip(&mut adam.frozen) {
                add_delta(params, &moments.direction(g, pc.lr))?;
            }
            step += 1;
        }
        epochs_run += 1;
        acc = accuracy(&model, &splits.pretrain_test)?;
        if epochs_run >= pc.min_epochs && acc >= pc.accuracy_floor {
            break;
        }
    }
    if pc.epochs > 0 && acc < pc.accuracy_floor {
        return Err(MasmError::PretrainFloor { reached: acc, floor: pc.accuracy_floor, epochs: epochs_run });
    }
    Ok(PretrainOutcome {
        checkpoint: Checkpoint { stage: Stage::Pretrained, step, rng: rng.state(), config: cfg.clone(), model },
        test_accuracy: acc,
        epochs_run,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub epoch: usize,
    /// 1-based iteration counter.
    pub step: usize,
    pub cls: f64,
    pub orth_mean: f64,
    pub spec_mean: f64,
    pub total: f64,
    pub popcount: usize,
    pub mask: String,
}

const GRAD_MAGIC: &[u8; 8] = b"MASMGRD1";

/// Append-only binary log of per-layer gradients, one record per iteration.
struct GradLogWriter {
    out: BufWriter<File>,
}

impl GradLogWriter {
    fn create(path: &Path, sizes: &[usize]) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(GRAD_MAGIC)?;
        out.write_all(&(sizes.len() as u64).to_le_bytes())?;
        for &s in sizes {
            out.write_all(&(s as u64).to_le_bytes())?;
        }
        Ok(GradLogWriter { out })
    }

    fn record(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        for g in grads {
            for v in g {
                self.out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads every per-iteration gradient record from a gradient log.
pub fn read_grad_log(path: &Path) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != GRAD_MAGIC {
        return Err(MasmError::Checkpoint("gradient log has bad magic".into()));
    }
    let n = read_u64(&mut r)? as usize;
    let sizes = (0..n).map(|_| read_u64(&mut r).map(|s| s as usize)).collect::<std::io::Result<Vec<_>>>()?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let per_iter: usize = 8 * sizes.iter().sum::<usize>();
    if per_iter == 0 || rest.len() % per_iter != 0 {
        return Err(MasmError::Checkpoint("gradient log is truncated".into()));
    }
    Ok(rest
        .chunks(per_iter)
        .map(|rec| {
            let mut vals = rec.chunks(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
            sizes.iter().map(|&s| vals.by_ref().take(s).collect()).collect()
        })
        .collect())
}

/// Recomputes the mask sequence from logged gradients alone.
pub fn replay_masks(path: &Path, stats_cfg: &StatsConfig, policy: &MaskPolicy) -> Result<Vec<LayerMask>> {
    let log = read_grad_log(path)?;
    let sizes: Vec<usize> = log.first().map(|g| g.iter().map(Vec::len).collect()).unwrap_or_default();
    let mut stats = GradientStats::new(&sizes);
    let mut masks = Vec::with_capacity(log.len());
    for (i, grads) in log.iter().enumerate() {
        stats.update(grads, stats_cfg.alpha)?;
        masks.push(build_mask(&stats.bvg(stats_cfg.eps), i + 1, policy));
    }
    Ok(masks)
}

/// Fine-tuning state: model, optimizer, gradient statistics and mask policy.
pub struct Finetuner {
    cfg: TrainConfig,
    pub model: Model,
    pub opt: OptimizerState,
    pub stats: GradientStats,
    pub policy: MaskPolicy,
    pub step: usize,
    rng: Rng,
    grad_log: Option<GradLogWriter>,
}

impl Finetuner {
    /// Decomposes the attention projections (unless MASFT is off) and
    /// attaches a fresh binary head. `n_train` sizes the default warmup.
    pub fn new(cfg: &TrainConfig, pretrained: &Model, n_train: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed.wrapping_add(stable_hash("finetune")));
        let mut model = pretrained.clone();
        if cfg.masft {
            model.decompose_attention(&cfg.decomposition)?;
        }
        model.reset_binary_head(&mut rng);
        let warmup = if cfg.mask.enabled {
            cfg.mask.warmup_steps.unwrap_or_else(|| iterations_per_epoch(n_train, cfg.optimizer.batch_size))
        } else {
            0
        };
        let policy = MaskPolicy { m: cfg.effective_m(), warmup_steps: warmup, forced_off: cfg.mask.forced_off.clone() };
        let grad_log = match &cfg.log.gradients {
            Some(p) => {
                let sizes: Vec<usize> = model.layers().map(|l| l.param_len()).collect();
                Some(GradLogWriter::create(p, &sizes)?)
            }
            None => None,
        };
        Ok(Finetuner {
            cfg: cfg.clone(),
            opt: OptimizerState::new(cfg.optimizer.mode, cfg.optimizer.lr, &model),
            stats: GradientStats::for_model(&model),
            model,
            policy,
            step: 0,
            rng,
            grad_log,
        })
    }

    /// One iteration: loss, gradients, statistics, mask, masked update.
    pub fn train_step(&mut self, batch: &TrainBatch, epoch: usize) -> Result<IterationLog> {
        let (report, grads) = backward(&self.model, batch, &self.cfg.weights, GradScope::Trainable)?;
        if let Some(log) = &mut self.grad_log {
            log.record(&grads.layers)?;
        }
        self.stats.update(&grads.layers, self.cfg.stats.alpha)?;
        self.step += 1;
        let mask = build_mask(&self.stats.bvg(self.cfg.stats.eps), self.step, &self.policy);
        apply_update(&mut self.model, &grads, &mask, &mut self.opt)?;
        Ok(IterationLog {
            epoch,
            step: self.step,
            cls: report.cls,
            orth_mean: report.orth_mean,
            spec_mean: report.spec_mean,
            total: report.total,
            popcount: mask.popcount(),
            mask: mask.as_bitstring(),
        })
    }

    pub fn run_epoch(&mut self, train: &[SyntheticSample], epoch: usize) -> Result<Vec<IterationLog>> {
        let batches = epoch_batches(train.len(), self.cfg.optimizer.batch_size, &mut self.rng);
        batches.iter().map(|idx| self.train_step(&detection_batch(train, idx), epoch)).collect()
    }

    pub fn finish(mut self) -> Result<Checkpoint> {
        if let Some(log) = &mut self.grad_log {
            log.out.flush()?;
        }
        Ok(Checkpoint {
            stage: Stage::Finetuned,
            step: self.step as u64,
            rng: self.rng.state(),
            config: self.cfg,
            model: self.model,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Frame,
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub level: Level,
    pub auc: f64,
    pub ap: f64,
    pub eer: f64,
}

/// Fake-probability scores grouped by clip.
pub fn score(model: &Model, samples: &[SyntheticSample]) -> Result<ScoredSet> {
    let inputs: Vec<_> = samples.iter().map(|s| s.tokens.clone()).collect();
    Ok(ScoredSet::with_groups(
        predict(model, &inputs)?,
        samples.iter().map(|s| s.label).collect(),
        samples.iter().map(|s| s.clip_id).collect(),
    ))
}

pub fn evaluate_set(model: &Model, name: &str, samples: &[SyntheticSample], pooling: Pooling) -> Result<[SplitMetrics; 2]> {
    let frame = score(model, samples)?;
    let video = video_level(&frame, pooling)?;
    let row = |level, s: &ScoredSet| -> Result<SplitMetrics> {
        let m = summarize(s)?;
        Ok(SplitMetrics { split: name.to_string(), level, auc: m.auc, ap: m.ap, eer: m.eer })
    };
    Ok([row(Level::Frame, &frame)?, row(Level::Video, &video)?])
}

/// In-domain, held-out and per-held-out-family metrics at frame and video level.
pub fn evaluate(model: &Model, splits: &Splits, cfg: &TrainConfig) -> Result<Vec<SplitMetrics>> {
    let pooling = cfg.eval.pooling;
    let mut out = Vec::new();
    out.extend(evaluate_set(model, "in_domain", &splits.test_in_domain, pooling)?);
    out.extend(evaluate_set(model, "heldout", &splits.test_heldout, pooling)?);
    for &f in &cfg.data.families_heldout {
        out.extend(evaluate_set(model, &format!("heldout/{f}"), &splits.heldout_family(f), pooling)?);
    }
    Ok(out)
}

pub fn find_metric<'a>(metrics: &'a [SplitMetrics], split: &str, level: Level) -> Option<&'a SplitMetrics> {
    metrics.iter().find(|m| m.split == split && m.level == level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub iterations: Vec<IterationLog>,
    pub metrics: Vec<SplitMetrics>,
    /// The only field that is not reproducible across runs.
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

/// Decomposes the pretrained backbone, fine-tunes on the training split and
/// evaluates every test split.
pub fn run_finetune(cfg: &TrainConfig, pretrained: &Checkpoint, splits: &Splits) -> Result<FinetuneOutcome> {
    let start = Instant::now();
    let mut tuner = Finetuner::new(cfg, &pretrained.model, splits.finetune_train.len())?;
    let mut iterations = Vec::new();
    for epoch in 0..cfg.optimizer.epochs {
        iterations.extend(tuner.run_epoch(&splits.finetune_train, epoch)?);
    }
    let checkpoint = tuner.finish()?;
    let metrics = evaluate(&checkpoint.model, splits, cfg)?;
    if let Some(path) = &cfg.log.iterations {
        write_iterations_csv(path, &iterations)?;
    }
    let record = RunRecord { config: cfg.clone(), iterations, metrics, wall_clock_secs: start.elapsed().as_secs_f64() };
    Ok(FinetuneOutcome { record, checkpoint })
}

pub fn write_iterations_csv(path: &Path, rows: &[IterationLog]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_iterations_csv(path: &Path) -> Result<Vec<IterationLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(MasmError::from)).collect()
}

/// `split,level,auc,ap,eer` with six decimals.
pub fn metrics_csv(metrics: &[SplitMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["split", "level", "auc", "ap", "eer"])?;
    for m in metrics {
        let level = match m.level {
            Level::Frame => "frame",
            Level::Video => "video",
        };
        w.write_record([m.split.clone(), level.into(), f6(m.auc), f6(m.ap), f6(m.eer)])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| MasmError::Io(e.into_error()))?).expect("csv output is utf-8"))
}

pub(crate) fn f6(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_splits;
    use crate::harness::config::MaskConfig;
    use crate::network::ModelConfig;
    use crate::subspace::{DecompositionConfig, RankPolicy};

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig { d_model: 8, n_blocks: 2, n_tokens: 4, d_ff: 16, n_classes_pretrain: 4 };
        cfg.decomposition = DecompositionConfig { rank_policy: RankPolicy::Fixed(3), k: 2 };
        cfg.data.pretrain_clips = 8;
        cfg.data.pretrain_test_clips = 4;
        cfg.data.finetune_train_clips = 8;
        cfg.data.test_clips = 4;
        cfg.data.heldout_clips = 4;
        cfg.optimizer.batch_size = 16;
        cfg.optimizer.epochs = 2;
        cfg.optimizer.lr = 1e-3;
        cfg.pretrain.epochs = 1;
        cfg.pretrain.min_epochs = 0;
        cfg.pretrain.accuracy_floor = 0.0;
        cfg.mask = MaskConfig { m: 3, warmup_steps: Some(2), ..MaskConfig::default() };
        cfg
    }

    #[test]
    fn zero_epoch_pretrain_is_initialization() {
        let mut cfg = tiny_cfg();
        cfg.pretrain.epochs = 0;
        let splits = build_splits(&cfg.data, cfg.dims(), cfg.seed).unwrap();
        let out = run_pretrain(&cfg, &splits).unwrap();
        let mut rng = Rng::new(cfg.seed.wrapping_add(stable_hash("pretrain")));
        assert_eq!(out.checkpoint.model, Model::init(cfg.model, &mut rng).unwrap());
        assert_eq!(out.checkpoint.step, 0);
    }

    #[test]
    fn unreachable_floor_is_an_error() {
        let mut cfg = tiny_cfg();
        cfg.pretrain.accuracy_floor = 1.0;
        cfg.data.noise = 5.0;
        let splits = build_splits(&cfg.data, cfg.dims(), cfg.seed).unwrap();
        assert!(matches!(run_pretrain(&cfg, &splits), Err(MasmError::PretrainFloor { .. })));
    }

    #[test]
    fn finetune_is_deterministic_and_masks_hold() {
        let cfg = tiny_cfg();
        let splits = build_splits(&cfg.data, cfg.dims(), cfg.seed).unwrap();
        let pre = run_pretrain(&cfg, &splits).unwrap().checkpoint;
        let a = run_finetune(&cfg, &pre, &splits).unwrap();
        let b = run_finetune(&cfg, &pre, &splits).unwrap();
        assert_eq!(a.record.iterations, b.record.iterations);
        assert_eq!(a.record.metrics, b.record.metrics);
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(a.record.iterations.len(), 2 * iterations_per_epoch(64, 16));
        for it in &a.record.iterations {
            let want = if it.step <= 2 { 8 } else { 3 };
            assert_eq!(it.popcount, want, "step {}", it.step);
        }
    }

    #[test]
    fn degenerate_config_reduces_to_plain_fine_tuning() {
        let mut cfg = tiny_cfg();
        cfg.weights.lambda_orth = 0.0;
        cfg.weights.lambda_spec = 0.0;
        cfg.decomposition.k = 1;
        cfg.mask.enabled = false;
        let splits = build_splits(&cfg.data, cfg.dims(), cfg.seed).unwrap();
        let pre = run_pretrain(&cfg, &splits).unwrap().checkpoint;
        let out = run_finetune(&cfg, &pre, &splits).unwrap();
        for it in &out.record.iterations {
            assert_eq!(it.total, it.cls);
            assert_eq!(it.popcount, 8);
        }
    }

    #[test]
    fn gradient_log_replays_masks() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.log.gradients = Some(dir.path().join("grads.bin"));
        cfg.log.iterations = Some(dir.path().join("iters.csv"));
        let splits = build_splits(&cfg.data, cfg.dims(), cfg.seed).unwrap();
        let pre = run_pretrain(&cfg, &splits).unwrap().checkpoint;
        let out = run_finetune(&cfg, &pre, &splits).unwrap();
        let policy = MaskPolicy { m: 3, warmup_steps: 2, forced_off: vec![] };
        let replay = replay_masks(dir.path().join("grads.bin").as_path(), &cfg.stats, &policy).unwrap();
        let logged: Vec<String> = out.record.iterations.iter().map(|i| i.mask.clone()).collect();
        assert_eq!(replay.iter().map(LayerMask::as_bitstring).collect::<Vec<_>>(), logged);
        assert_eq!(read_iterations_csv(&dir.path().join("iters.csv")).unwrap(), out.record.iterations);
    }

    #[test]
    fn metrics_csv_has_six_decimals() {
        let rows = vec![SplitMetrics { split: "in_domain".into(), level: Level::Video, auc: 0.5, ap: 2.0 / 3.0, eer: 0.25 }];
        assert_eq!(metrics_csv(&rows).unwrap(), "split,level,auc,ap,eer\nin_domain,video,0.500000,0.666667,0.250000\n");
    }
}
