//! Ablation grids, the robustness grid, decomposition inspection and the
//! gradient check on a tiny model.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::train::{evaluate_set, f6, find_metric, run_finetune, score, Level, SplitMetrics};
use crate::data::{robustness_cell, ArtifactFamily, Splits, MAX_LEVEL};
use crate::error::{MasmError, Result};
use crate::losses::{orth_loss, spec_loss, LossWeights};
use crate::metrics::{auc, video_level};
use crate::network::{grad_check, GradCheckReport, Model, ModelConfig, Projection, TrainBatch, PROJ_NAMES};
use crate::subspace::{decompose, DecompositionConfig};
use crate::tensor::{stable_hash, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AblationTable {
    Components,
    Losses,
    SubspaceCount,
    MaskSize,
}

impl AblationTable {
    pub const ALL: [AblationTable; 4] =
        [AblationTable::Components, AblationTable::Losses, AblationTable::SubspaceCount, AblationTable::MaskSize];

    pub fn name(self) -> &'static str {
        match self {
            AblationTable::Components => "components",
            AblationTable::Losses => "losses",
            AblationTable::SubspaceCount => "k",
            AblationTable::MaskSize => "m",
        }
    }
}

pub const K_GRID: [usize; 5] = [1, 3, 5, 7, 9];
pub const M_GRID: [usize; 5] = [1, 4, 16, 48, 96];

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub table: AblationTable,
    pub index: usize,
    pub key: String,
    pub cfg: TrainConfig,
}

/// Every ablation cell derived from `base`, each with its own seed.
pub fn ablation_cells(base: &TrainConfig) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    let mut push = |table: AblationTable, index: usize, key: String, edit: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        edit(&mut cfg);
        cfg.log = Default::default();
        cfg.data.seed = Some(base.data_seed());
        cfg.seed = base.seed.wrapping_add(stable_hash(&key));
        cells.push(AblationCell { table, index, key, cfg });
    };
    for (i, (masft, slm)) in [(false, false), (true, false), (false, true), (true, true)].into_iter().enumerate() {
        push(AblationTable::Components, i, format!("components/masft={masft};slm={slm}"), &|c| {
            c.masft = masft;
            c.mask.enabled = slm;
        });
    }
    for (i, (l1, l2)) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)].into_iter().enumerate() {
        push(AblationTable::Losses, i, format!("losses/orth={l1};spec={l2}"), &|c| {
            c.weights = LossWeights { lambda_orth: l1, lambda_spec: l2 };
        });
    }
    for (i, k) in K_GRID.into_iter().enumerate() {
        push(AblationTable::SubspaceCount, i, format!("k/{k}"), &|c| c.decomposition.k = k);
    }
    for (i, m) in M_GRID.into_iter().enumerate() {
        push(AblationTable::MaskSize, i, format!("m/{m}"), &|c| c.mask.m = m);
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub table: AblationTable,
    pub index: usize,
    pub key: String,
    pub cfg: TrainConfig,
    /// Metrics, or the error that stopped this cell.
    pub outcome: std::result::Result<Vec<SplitMetrics>, String>,
}

/// Runs every cell from one pretrained backbone. A failing cell records its
/// error and the rest keep going.
pub fn run_ablation(base: &TrainConfig, pretrained: &Checkpoint, splits: &Splits) -> Vec<AblationRow> {
    let mut rows: Vec<AblationRow> = ablation_cells(base)
        .into_par_iter()
        .map(|cell| {
            let outcome = run_finetune(&cell.cfg, pretrained, splits)
                .map(|o| o.record.metrics)
                .map_err(|e| format!("{}: {e}", e.kind()));
            AblationRow { table: cell.table, index: cell.index, key: cell.key, cfg: cell.cfg, outcome }
        })
        .collect();
    rows.sort_by(|a, b| (a.table, a.index).cmp(&(b.table, b.index)));
    rows
}

/// Splits reported in ablation tables: in-domain plus each held-out family.
fn target_splits(cfg: &TrainConfig) -> Vec<String> {
    std::iter::once("in_domain".to_string())
        .chain(cfg.data.families_heldout.iter().map(|f| format!("heldout/{f}")))
        .collect()
}

/// One CSV per table: cell settings, frame AUC/AP/EER and video AUC per
/// target split, then their means.
pub fn ablation_csv(base: &TrainConfig, rows: &[AblationRow], table: AblationTable) -> Result<String> {
    let targets = target_splits(base);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> =
        ["cell", "masft", "slm", "lambda_orth", "lambda_spec", "k", "m", "m_effective", "seed", "status"]
            .map(String::from)
            .to_vec();
    for t in &targets {
        let col = t.replace('/', "_");
        header.extend(["auc", "ap", "eer", "video_auc"].map(|m| format!("{col}_{m}")));
    }
    header.extend(["mean_auc", "mean_ap", "mean_eer", "mean_video_auc"].map(String::from));
    w.write_record(&header)?;
    for row in rows.iter().filter(|r| r.table == table) {
        let c = &row.cfg;
        let mut rec = vec![
            row.key.clone(),
            c.masft.to_string(),
            c.mask.enabled.to_string(),
            c.weights.lambda_orth.to_string(),
            c.weights.lambda_spec.to_string(),
            c.decomposition.k.to_string(),
            c.mask.m.to_string(),
            c.effective_m().to_string(),
            c.seed.to_string(),
        ];
        match &row.outcome {
            Ok(metrics) => {
                rec.push("ok".into());
                let mut sums = [0.0; 4];
                for t in &targets {
                    let frame = find_metric(metrics, t, Level::Frame)
                        .ok_or_else(|| MasmError::Metric(format!("missing split {t}")))?;
                    let video = find_metric(metrics, t, Level::Video)
                        .ok_or_else(|| MasmError::Metric(format!("missing split {t}")))?;
                    let vals = [frame.auc, frame.ap, frame.eer, video.auc];
                    for (s, v) in sums.iter_mut().zip(vals) {
                        *s += v;
                    }
                    rec.extend(vals.map(f6));
                }
                rec.extend(sums.map(|s| f6(s / targets.len() as f64)));
            }
            Err(e) => {
                rec.push(format!("error: {e}"));
                rec.extend(std::iter::repeat_n(String::new(), 4 * targets.len() + 4));
            }
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| MasmError::Io(e.into_error()))?).expect("utf-8 csv"))
}

pub fn write_ablation(dir: &Path, base: &TrainConfig, rows: &[AblationRow]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    AblationTable::ALL
        .iter()
        .map(|&t| {
            let path = dir.join(format!("ablation_{}.csv", t.name()));
            std::fs::write(&path, ablation_csv(base, rows, t)?)?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessRow {
    /// `None` is the undistorted cell.
    pub family: Option<ArtifactFamily>,
    pub level: u8,
    pub frame_auc: f64,
    pub video_auc: f64,
    pub video_ap: f64,
    pub video_eer: f64,
}

/// Clean row first, then every family at levels 1 to 5, each distorting all
/// in-domain test samples.
pub fn run_robustness(cfg: &TrainConfig, model: &Model, splits: &Splits) -> Result<Vec<RobustnessRow>> {
    let mut cells: Vec<(Option<ArtifactFamily>, u8)> = vec![(None, 0)];
    for f in ArtifactFamily::ALL {
        cells.extend((1..=MAX_LEVEL).map(|l| (Some(f), l)));
    }
    cells
        .into_par_iter()
        .map(|(family, level)| {
            let samples = match family {
                None => splits.test_in_domain.clone(),
                Some(f) => robustness_cell(&splits.test_in_domain, f, level, cfg.seed)?,
            };
            let [frame, video] = evaluate_set(model, "robustness", &samples, cfg.eval.pooling)?;
            Ok(RobustnessRow {
                family,
                level,
                frame_auc: frame.auc,
                video_auc: video.auc,
                video_ap: video.ap,
                video_eer: video.eer,
            })
        })
        .collect()
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["family", "level", "frame_auc", "video_auc", "video_ap", "video_eer"])?;
    for r in rows {
        w.write_record([
            r.family.map_or("clean".to_string(), |f| f.to_string()),
            r.level.to_string(),
            f6(r.frame_auc),
            f6(r.video_auc),
            f6(r.video_ap),
            f6(r.video_eer),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| MasmError::Io(e.into_error()))?).expect("utf-8 csv"))
}

/// Mean video AUC per level across families: a quick view of degradation.
pub fn robustness_trend(rows: &[RobustnessRow]) -> Vec<(u8, f64)> {
    (1..=MAX_LEVEL)
        .map(|l| {
            let at: Vec<f64> = rows.iter().filter(|r| r.family.is_some() && r.level == l).map(|r| r.video_auc).collect();
            (l, at.iter().sum::<f64>() / at.len().max(1) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerInspection {
    pub layer: usize,
    pub block: usize,
    pub proj: String,
    pub d_out: usize,
    pub d_in: usize,
    /// Numerical rank `R` of the pretrained weight.
    pub rank: usize,
    pub r: usize,
    pub artifact_ranks: Vec<usize>,
    pub semantic_energy: f64,
    pub artifact_energy: Vec<f64>,
    pub orth_init: f64,
    pub spec_init: f64,
}

/// Per-layer decomposition summary. Dense layers are decomposed under
/// `cfg.decomposition`; already decomposed layers are reported as stored.
pub fn decompose_inspect(ckpt: &Checkpoint, cfg: &DecompositionConfig) -> Result<Vec<LayerInspection>> {
    cfg.validate()?;
    ckpt.model
        .layers()
        .enumerate()
        .map(|(l, p)| {
            let layer = match p {
                Projection::Dense(w) => decompose(w, cfg, l)?,
                Projection::Decomposed(d) => d.clone(),
            };
            let m = layer.manifest();
            let (semantic_energy, artifact_energy) = layer.energy_fractions();
            Ok(LayerInspection {
                layer: l,
                block: l / 4,
                proj: PROJ_NAMES[l % 4].to_string(),
                d_out: m.d_out,
                d_in: m.d_in,
                rank: m.r + m.artifact_ranks.iter().sum::<usize>(),
                r: m.r,
                artifact_ranks: m.artifact_ranks,
                semantic_energy,
                artifact_energy,
                orth_init: orth_loss(&layer),
                spec_init: spec_loss(&layer)?,
            })
        })
        .collect()
}

pub fn inspection_csv(rows: &[LayerInspection]) -> Result<String> {
    let join = |v: Vec<String>| v.join(";");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer",
        "block",
        "proj",
        "d_out",
        "d_in",
        "rank",
        "r",
        "artifact_ranks",
        "semantic_energy",
        "artifact_energy",
        "orth_init",
        "spec_init",
    ])?;
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            r.block.to_string(),
            r.proj.clone(),
            r.d_out.to_string(),
            r.d_in.to_string(),
            r.rank.to_string(),
            r.r.to_string(),
            join(r.artifact_ranks.iter().map(usize::to_string).collect()),
            r.semantic_energy.to_string(),
            join(r.artifact_energy.iter().map(f64::to_string).collect()),
            format!("{:e}", r.orth_init),
            format!("{:e}", r.spec_init),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| MasmError::Io(e.into_error()))?).expect("utf-8 csv"))
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig { d_model: 8, n_blocks: 2, n_tokens: 4, d_ff: 16, n_classes_pretrain: 4 }
}

/// Tiny decomposed model (d_model 8, 2 blocks, K = 2) with artifact factors
/// moved off their initial values, plus a small binary batch.
pub fn tiny_grad_problem(seed: u64) -> Result<(Model, TrainBatch)> {
    let mut rng = Rng::new(seed);
    let cfg = tiny_model_config();
    let mut model = Model::init(cfg, &mut rng)?;
    model.decompose_attention(&DecompositionConfig { k: 2, ..DecompositionConfig::default() })?;
    model.reset_binary_head(&mut rng);
    for l in 0..model.n_layers() {
        let p: Vec<f64> = model.layer(l).flat_params().iter().map(|v| v + 0.05 * rng.normal()).collect();
        model.layer_mut(l).set_flat_params(&p)?;
    }
    for v in model.head.data_mut() {
        *v += 0.3 * rng.normal();
    }
    let inputs: Vec<Matrix> = (0..4).map(|_| Matrix::from_fn(cfg.n_tokens, cfg.d_model, |_, _| rng.normal())).collect();
    Ok((model, TrainBatch { inputs, labels: vec![1, 0, 0, 1], clip_ids: vec![0, 1, 2, 3] }))
}

/// Central-difference check of every artifact factor and head weight on
/// the tiny problem, with both regularizers switched on.
pub fn tiny_grad_check(seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let (model, batch) = tiny_grad_problem(seed)?;
    grad_check(&model, &batch, &LossWeights::default(), h, tol)
}

/// Frame AUC of a model on the in-domain test split; the quickest sanity probe.
pub fn in_domain_auc(model: &Model, splits: &Splits) -> Result<f64> {
    auc(&score(model, &splits.test_in_domain)?)
}

/// Video AUC of a model on the in-domain test split.
pub fn in_domain_video_auc(model: &Model, splits: &Splits, cfg: &TrainConfig) -> Result<f64> {
    auc(&video_level(&score(model, &splits.test_in_domain)?, cfg.eval.pooling)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_the_table_row_sets() {
        let cells = ablation_cells(&TrainConfig::default());
        let count = |t| cells.iter().filter(|c| c.table == t).count();
        assert_eq!(count(AblationTable::Components), 4);
        assert_eq!(count(AblationTable::Losses), 4);
        assert_eq!(count(AblationTable::SubspaceCount), 5);
        assert_eq!(count(AblationTable::MaskSize), 5);
        let ms: Vec<usize> = cells.iter().filter(|c| c.table == AblationTable::MaskSize).map(|c| c.cfg.effective_m()).collect();
        assert_eq!(ms, vec![1, 4, 16, 24, 24]);
        let mut seeds: Vec<u64> = cells.iter().map(|c| c.cfg.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), cells.len());
    }

    #[test]
    fn tiny_gradients_check_out() {
        let report = tiny_grad_check(0, 1e-5, 1e-5).unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn inspection_of_fresh_model() {
        let cfg = TrainConfig::default();
        let model = Model::init(cfg.model, &mut Rng::new(1)).unwrap();
        let ck = Checkpoint {
            stage: super::super::checkpoint::Stage::Pretrained,
            step: 0,
            rng: Rng::new(1).state(),
            config: cfg.clone(),
            model,
        };
        let rows = decompose_inspect(&ck, &cfg.decomposition).unwrap();
        assert_eq!(rows.len(), 24);
        for r in &rows {
            assert!(r.orth_init <= 1e-9 && r.spec_init <= 1e-9);
            assert!((r.semantic_energy + r.artifact_energy.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert_eq!(r.artifact_ranks.len(), 5);
        }
        assert_eq!(inspection_csv(&rows).unwrap().lines().count(), 25);
    }
}
