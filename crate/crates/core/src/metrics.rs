//! Detection metrics over scored samples: ROC AUC, average precision and
//! equal error rate, at frame level or after pooling scores per clip.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MasmError, Result};

/// Scores with binary labels (1 = fake/positive) and optional clip ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub group_ids: Option<Vec<u64>>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Self {
        ScoredSet { scores, labels, group_ids: None }
    }

    pub fn with_groups(scores: Vec<f64>, labels: Vec<u8>, groups: Vec<u64>) -> Self {
        ScoredSet { scores, labels, group_ids: Some(groups) }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn validate(&self) -> Result<(usize, usize)> {
        if self.scores.len() != self.labels.len() {
            return Err(MasmError::Metric(format!("{} scores vs {} labels", self.scores.len(), self.labels.len())));
        }
        if let Some(g) = &self.group_ids {
            if g.len() != self.scores.len() {
                return Err(MasmError::Metric("group ids do not match scores".into()));
            }
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(MasmError::Metric("non-finite score".into()));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(MasmError::Metric("labels must be 0 or 1".into()));
        }
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        Ok((pos, self.labels.len() - pos))
    }

    fn both_classes(&self) -> Result<(usize, usize)> {
        let (p, n) = self.validate()?;
        if p == 0 || n == 0 {
            return Err(MasmError::Metric(format!("need both classes, got {p} positives and {n} negatives")));
        }
        Ok((p, n))
    }

    /// `(positives, negatives)` per block of tied scores, highest score first.
    fn descending_blocks(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut blocks = Vec::new();
        let mut i = 0;
        while i < idx.len() {
            let s = self.scores[idx[i]];
            let (mut p, mut n) = (0, 0);
            while i < idx.len() && self.scores[idx[i]] == s {
                if self.labels[idx[i]] == 1 {
                    p += 1;
                } else {
                    n += 1;
                }
                i += 1;
            }
            blocks.push((p, n));
        }
        blocks
    }
}

/// Mann-Whitney statistic with midranks for ties.
pub fn auc(s: &ScoredSet) -> Result<f64> {
    let (p, n) = s.both_classes()?;
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // twice the rank sum, to stay in integers under midranks
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && s.scores[idx[j]] == s.scores[idx[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j) as u64; // 2 * (i+1 + j) / 2
        let pos_in_block = idx[i..j].iter().filter(|&&k| s.labels[k] == 1).count() as u64;
        rank_sum2 += midrank2 * pos_in_block;
        i = j;
    }
    let u2 = rank_sum2 - (p * (p + 1)) as u64;
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// `sum_k (R_k - R_{k-1}) P_k` over a descending sweep, ties as one step.
pub fn average_precision(s: &ScoredSet) -> Result<f64> {
    let (p, _) = s.validate()?;
    if p == 0 {
        return Err(MasmError::Metric("average precision needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (bp, bn) in s.descending_blocks() {
        tp += bp;
        fp += bn;
        if bp > 0 {
            ap += (bp as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// Point on the ROC polyline where false-positive and false-negative rates
/// meet. The crossing is solved in integers so the result is one rounding
/// away from the exact value.
pub fn eer(s: &ScoredSet) -> Result<f64> {
    let (p, n) = s.both_classes()?;
    let (pi, ni) = (p as i128, n as i128);
    // h(fp, tp) = n p (fpr + tpr - 1): negative before the crossing
    let h = |fp: i128, tp: i128| fp * pi + tp * ni - ni * pi;
    let (mut tp, mut fp) = (0i128, 0i128);
    for (bp, bn) in s.descending_blocks() {
        let (fp0, tp0) = (fp, tp);
        tp += bp as i128;
        fp += bn as i128;
        let h_cur = h(fp, tp);
        if h_cur == 0 {
            return Ok(fp as f64 / n as f64);
        }
        if h_cur > 0 {
            // fpr = (fp0 + lambda dfp) / n with lambda = -h0 / (h_cur - h0)
            let slope = h_cur - h(fp0, tp0);
            let num = fp0 * slope - h(fp0, tp0) * (fp - fp0);
            return Ok(num as f64 / (ni * slope) as f64);
        }
    }
    unreachable!("ROC polyline always ends at (1, 1)")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// One score per clip; groups come out in ascending id order.
pub fn video_level(s: &ScoredSet, pooling: Pooling) -> Result<ScoredSet> {
    s.validate()?;
    let groups = s.group_ids.as_ref().ok_or_else(|| MasmError::Metric("video-level pooling needs group ids".into()))?;
    let mut acc: BTreeMap<u64, (f64, usize, u8)> = BTreeMap::new();
    for ((&g, &score), &label) in groups.iter().zip(&s.scores).zip(&s.labels) {
        let e = acc.entry(g).or_insert((
            match pooling {
                Pooling::Mean => 0.0,
                Pooling::Max => f64::NEG_INFINITY,
            },
            0,
            label,
        ));
        if e.2 != label {
            return Err(MasmError::Metric(format!("clip {g} mixes real and fake samples")));
        }
        match pooling {
            Pooling::Mean => e.0 += score,
            Pooling::Max => e.0 = e.0.max(score),
        }
        e.1 += 1;
    }
    let mut out = ScoredSet { scores: Vec::new(), labels: Vec::new(), group_ids: Some(Vec::new()) };
    for (g, (v, count, label)) in acc {
        out.scores.push(match pooling {
            Pooling::Mean => v / count as f64,
            Pooling::Max => v,
        });
        out.labels.push(label);
        out.group_ids.as_mut().expect("set above").push(g);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auc: f64,
    pub ap: f64,
    pub eer: f64,
}

pub fn summarize(s: &ScoredSet) -> Result<MetricSummary> {
    Ok(MetricSummary { auc: auc(s)?, ap: average_precision(s)?, eer: eer(s)? })
}
