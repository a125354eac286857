//! Seeded synthetic detection data.
//!
//! "Real" samples are smooth class-conditional token signals confined to a
//! natural subspace holding half of the feature dimensions: per class a fixed
//! low-frequency pattern over tokens plus an alternating texture, shifted by
//! a per-clip offset and perturbed by isotropic per-sample noise.
//!
//! Every artifact family has a structural transform (a patch, a ripple, a
//! blur, a block quantization, low-rank noise) whose strength grows with the
//! level. Forgeries apply the structural transform and also leave a trace in
//! the complement of the natural subspace along the family's signature. The
//! trace grows linearly with the level and is spread over tokens in
//! proportion to where the structural change happened. Signatures
//! share one common component, so training on some families transfers
//! partially to held-out ones. Robustness distortions apply the structural
//! transform alone.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MasmError, Result};
use crate::tensor::{stable_hash, svd, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactFamily {
    LocalizedPatch,
    HighFrequencyRipple,
    TokenBlur,
    BlockQuantization,
    StructuredNoise,
}

impl ArtifactFamily {
    pub const ALL: [ArtifactFamily; 5] = [
        ArtifactFamily::LocalizedPatch,
        ArtifactFamily::HighFrequencyRipple,
        ArtifactFamily::TokenBlur,
        ArtifactFamily::BlockQuantization,
        ArtifactFamily::StructuredNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArtifactFamily::LocalizedPatch => "localized-patch",
            ArtifactFamily::HighFrequencyRipple => "high-frequency-ripple",
            ArtifactFamily::TokenBlur => "token-blur",
            ArtifactFamily::BlockQuantization => "block-quantization",
            ArtifactFamily::StructuredNoise => "structured-noise",
        }
    }
}

impl fmt::Display for ArtifactFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArtifactFamily {
    type Err = MasmError;

    fn from_str(s: &str) -> Result<Self> {
        ArtifactFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| MasmError::UnknownFamily(s.to_string()))
    }
}

pub const MAX_LEVEL: u8 = 5;

const PATCH_AMP: f64 = 2.0;
const RIPPLE_AMP: f64 = 1.0;
const NOISE_AMP: f64 = 1.0;
const QUANT_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `n_tokens x d_model`.
    pub tokens: Matrix,
    /// 1 = fake.
    pub label: u8,
    pub base_class: usize,
    pub family: Option<ArtifactFamily>,
    pub intensity: Option<u8>,
    pub clip_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_base_classes: usize,
    pub families_train: Vec<ArtifactFamily>,
    pub families_heldout: Vec<ArtifactFamily>,
    pub clip_size: usize,
    pub pretrain_clips: usize,
    pub pretrain_test_clips: usize,
    pub finetune_train_clips: usize,
    pub test_clips: usize,
    pub heldout_clips: usize,
    /// Per-sample noise standard deviation.
    pub noise: f64,
    /// Per-clip offset standard deviation.
    pub clip_offset: f64,
    /// Amplitude of the alternating class texture.
    pub texture: f64,
    /// Dimension of the subspace real signals live in; `None` means half of `d_model`.
    pub natural_dim: Option<usize>,
    /// Size of a forgery's token-averaged trace at level 5.
    pub trace_gain: f64,
    /// Weight of the component shared by all family signatures.
    pub shared_trace: f64,
    /// Fake clips draw their artifact level uniformly from this inclusive range.
    pub fake_level_min: u8,
    pub fake_level_max: u8,
    /// Generator seed; `None` falls back to the run seed.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_base_classes: 4,
            families_train: vec![
                ArtifactFamily::LocalizedPatch,
                ArtifactFamily::HighFrequencyRipple,
                ArtifactFamily::TokenBlur,
            ],
            families_heldout: vec![ArtifactFamily::BlockQuantization, ArtifactFamily::StructuredNoise],
            clip_size: 8,
            pretrain_clips: 128,
            pretrain_test_clips: 32,
            finetune_train_clips: 256,
            test_clips: 64,
            heldout_clips: 64,
            noise: 0.1,
            clip_offset: 0.2,
            texture: 0.5,
            natural_dim: None,
            trace_gain: 4.0,
            shared_trace: 1.0,
            fake_level_min: 2,
            fake_level_max: 5,
            seed: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families_train.is_empty() || self.families_heldout.is_empty() {
            return Err(MasmError::Config("families_train and families_heldout must be non-empty".into()));
        }
        if let Some(f) = self.families_train.iter().find(|f| self.families_heldout.contains(f)) {
            return Err(MasmError::Config(format!("family {f} is both a training and a held-out family")));
        }
        if self.n_base_classes < 2 || self.clip_size == 0 {
            return Err(MasmError::Config("need >= 2 base classes and clip_size >= 1".into()));
        }
        for (name, n) in [
            ("finetune_train_clips", self.finetune_train_clips),
            ("test_clips", self.test_clips),
            ("heldout_clips", self.heldout_clips),
        ] {
            if n == 0 || n % 2 != 0 {
                return Err(MasmError::Config(format!("{name} must be a positive even count for 50/50 balance")));
            }
        }
        if self.pretrain_clips == 0 || self.pretrain_test_clips == 0 {
            return Err(MasmError::Config("pretraining splits must be non-empty".into()));
        }
        if !(1..=MAX_LEVEL).contains(&self.fake_level_min)
            || !(self.fake_level_min..=MAX_LEVEL).contains(&self.fake_level_max)
        {
            return Err(MasmError::Config("fake levels must satisfy 1 <= min <= max <= 5".into()));
        }
        if ![self.noise, self.clip_offset, self.texture, self.trace_gain, self.shared_trace].iter().all(|v| *v >= 0.0) {
            return Err(MasmError::Config("noise, clip_offset, texture, trace_gain and shared_trace must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sample geometry shared with the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_tokens: usize,
    pub d_model: usize,
}

/// The fixed random world behind a dataset: a natural subspace, class
/// patterns inside it and one trace signature per family outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    cfg: DataConfig,
    dims: Dims,
    natural_dim: usize,
    /// Orthonormal `d x d`; the first `natural_dim` columns span the natural subspace.
    basis: Matrix,
    patterns: Vec<Matrix>,
    signatures: Vec<Vec<f64>>,
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl Generator {
    pub fn new(cfg: &DataConfig, dims: Dims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = dims.d_model;
        let ns = cfg.natural_dim.unwrap_or(d / 2);
        if ns == 0 || ns >= d || dims.n_tokens == 0 {
            return Err(MasmError::Config(format!("natural_dim {ns} must lie in 1..{d}")));
        }
        let mut rng = Rng::new(seed.wrapping_add(stable_hash("generator")));
        let basis = svd(&Matrix::from_fn(d, d, |_, _| rng.normal()))?.u;
        let natural = |coeff: &[f64]| -> Vec<f64> {
            (0..d).map(|i| (0..ns).map(|k| basis[(i, k)] * coeff[k]).sum()).collect()
        };
        let t = dims.n_tokens;
        let patterns = (0..cfg.n_base_classes)
            .map(|_| {
                let b: Vec<Vec<f64>> = (0..3).map(|_| natural(&(0..ns).map(|_| rng.normal()).collect::<Vec<_>>())).collect();
                let tex = natural(&(0..ns).map(|_| cfg.texture * rng.normal()).collect::<Vec<_>>());
                Matrix::from_fn(t, d, |i, j| {
                    let phase = if t > 1 { std::f64::consts::PI * i as f64 / (t - 1) as f64 } else { 0.0 };
                    let alt = if i % 2 == 0 { 1.0 } else { -1.0 };
                    b[0][j] + phase.cos() * b[1][j] + phase.sin() * b[2][j] + alt * tex[j]
                })
            })
            .collect();
        let nc = d - ns;
        let common = rng.unit_vector(nc);
        let signatures = ArtifactFamily::ALL
            .iter()
            .map(|_| {
                let own = rng.unit_vector(nc);
                let coeff = normalized(common.iter().zip(&own).map(|(c, o)| cfg.shared_trace * c + o).collect());
                (0..d).map(|i| (0..nc).map(|k| basis[(i, ns + k)] * coeff[k]).sum()).collect()
            })
            .collect();
        Ok(Generator { cfg: cfg.clone(), dims, natural_dim: ns, basis, patterns, signatures })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// `d x natural_dim` orthonormal basis of the natural subspace.
    pub fn natural_basis(&self) -> Matrix {
        self.basis.columns(0..self.natural_dim)
    }

    /// `d x (d - natural_dim)` orthonormal basis of its complement.
    pub fn complement_basis(&self) -> Matrix {
        self.basis.columns(self.natural_dim..self.dims.d_model)
    }

    pub fn pattern(&self, class: usize) -> &Matrix {
        &self.patterns[class]
    }

    /// Unit trace direction of a family, inside the complement.
    pub fn signature(&self, family: ArtifactFamily) -> &[f64] {
        let i = ArtifactFamily::ALL.iter().position(|&f| f == family).expect("family listed in ALL");
        &self.signatures[i]
    }

    /// A clip of real samples of one class sharing a clip offset.
    pub fn gen_real(&self, class: usize, clip_id: u64, rng: &mut Rng) -> Vec<SyntheticSample> {
        let cfg = &self.cfg;
        let pattern = &self.patterns[class];
        let (t, d) = pattern.shape();
        let coeff: Vec<f64> = (0..self.natural_dim).map(|_| cfg.clip_offset * rng.normal()).collect();
        let offset: Vec<f64> = (0..d).map(|i| (0..self.natural_dim).map(|k| self.basis[(i, k)] * coeff[k]).sum()).collect();
        (0..cfg.clip_size)
            .map(|_| {
                let gain = 1.0 + cfg.noise * rng.normal();
                let mut tokens = Matrix::from_fn(t, d, |i, j| gain * pattern[(i, j)] + offset[j]);
                for v in tokens.data_mut() {
                    *v += cfg.noise * rng.normal();
                }
                SyntheticSample { tokens, label: 0, base_class: class, family: None, intensity: None, clip_id }
            })
            .collect()
    }

    /// Turns a real sample into a fake of `family` at `level`: the structural
    /// transform plus the family trace.
    pub fn apply_artifact(&self, sample: &SyntheticSample, family: ArtifactFamily, level: u8, rng: &mut Rng) -> Result<SyntheticSample> {
        let a = check_level(level)?;
        let mut out = distort(sample, family, level, rng)?;
        let change: Vec<f64> = (0..out.tokens.rows())
            .map(|i| out.tokens.row(i).iter().zip(sample.tokens.row(i)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
            .collect();
        let mean_change = change.iter().sum::<f64>() / change.len() as f64;
        if mean_change > 0.0 {
            let sig = self.signature(family);
            for (i, c) in change.iter().enumerate() {
                let w = self.cfg.trace_gain * a * c / mean_change;
                for (v, s) in out.tokens.row_mut(i).iter_mut().zip(sig) {
                    *v += w * s;
                }
            }
        }
        out.label = 1;
        out.family = Some(family);
        out.intensity = Some(level);
        Ok(out)
    }

    pub fn apply_artifact_named(&self, sample: &SyntheticSample, family: &str, level: u8, rng: &mut Rng) -> Result<SyntheticSample> {
        self.apply_artifact(sample, family.parse()?, level, rng)
    }
}

fn check_level(level: u8) -> Result<f64> {
    if (1..=MAX_LEVEL).contains(&level) {
        Ok(f64::from(level) / f64::from(MAX_LEVEL))
    } else {
        Err(MasmError::Config(format!("artifact level {level} outside 1..=5")))
    }
}

/// Three-tap `[1/4, 1/2, 1/4]` smoothing across tokens with edge replication.
fn blur_tokens(x: &Matrix) -> Matrix {
    let t = x.rows();
    Matrix::from_fn(t, x.cols(), |i, j| {
        let prev = x[(i.saturating_sub(1), j)];
        let next = x[((i + 1).min(t - 1), j)];
        0.25 * prev + 0.5 * x[(i, j)] + 0.25 * next
    })
}

/// Token-pair block means snapped to a coarse grid.
fn block_quantize(x: &Matrix) -> Matrix {
    let t = x.rows();
    Matrix::from_fn(t, x.cols(), |i, j| {
        let start = i - i % 2;
        let end = (start + 2).min(t);
        let mean = (start..end).map(|r| x[(r, j)]).sum::<f64>() / (end - start) as f64;
        (mean / QUANT_STEP).round() * QUANT_STEP
    })
}

/// The structural part of a family's transform at `level`; labels and
/// metadata are left alone. This is the robustness distortion.
pub fn distort(sample: &SyntheticSample, family: ArtifactFamily, level: u8, rng: &mut Rng) -> Result<SyntheticSample> {
    let a = check_level(level)?;
    let x = &sample.tokens;
    let (t, d) = x.shape();
    let tokens = match family {
        ArtifactFamily::LocalizedPatch => {
            let width = (t / 4).max(1);
            let start = rng.below(t - width + 1);
            let dir = rng.unit_vector(d);
            let mut y = x.clone();
            for i in start..start + width {
                for (v, u) in y.row_mut(i).iter_mut().zip(&dir) {
                    *v += a * PATCH_AMP * u;
                }
            }
            y
        }
        ArtifactFamily::HighFrequencyRipple => {
            let dir = rng.unit_vector(d);
            Matrix::from_fn(t, d, |i, j| {
                let alt = if i % 2 == 0 { 1.0 } else { -1.0 };
                x[(i, j)] + a * RIPPLE_AMP * alt * dir[j]
            })
        }
        ArtifactFamily::TokenBlur => {
            let b = blur_tokens(&blur_tokens(x));
            Matrix::from_fn(t, d, |i, j| x[(i, j)] + a * (b[(i, j)] - x[(i, j)]))
        }
        ArtifactFamily::BlockQuantization => {
            let q = block_quantize(x);
            Matrix::from_fn(t, d, |i, j| x[(i, j)] + a * (q[(i, j)] - x[(i, j)]))
        }
        ArtifactFamily::StructuredNoise => {
            let g: Vec<f64> = (0..t).map(|_| rng.normal()).collect();
            let h = rng.unit_vector(d);
            Matrix::from_fn(t, d, |i, j| x[(i, j)] + a * NOISE_AMP * g[i] * h[j])
        }
    };
    Ok(SyntheticSample { tokens, ..sample.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub pretrain_train: Vec<SyntheticSample>,
    pub pretrain_test: Vec<SyntheticSample>,
    pub finetune_train: Vec<SyntheticSample>,
    pub test_in_domain: Vec<SyntheticSample>,
    pub test_heldout: Vec<SyntheticSample>,
}

impl Splits {
    pub fn named(&self) -> [(&'static str, &[SyntheticSample]); 5] {
        [
            ("pretrain_train", &self.pretrain_train),
            ("pretrain_test", &self.pretrain_test),
            ("finetune_train", &self.finetune_train),
            ("test_in_domain", &self.test_in_domain),
            ("test_heldout", &self.test_heldout),
        ]
    }

    /// Held-out test samples restricted to one family, plus every real sample.
    pub fn heldout_family(&self, family: ArtifactFamily) -> Vec<SyntheticSample> {
        self.test_heldout.iter().filter(|s| s.label == 0 || s.family == Some(family)).cloned().collect()
    }
}

fn clip_seed(base: u64, split: &str, index: usize) -> u64 {
    base.wrapping_add(stable_hash(split)).wrapping_add(index as u64)
}

fn split_tag(split: &str) -> u64 {
    (stable_hash(split) & 0xffff) << 32
}

fn real_split(world: &Generator, seed: u64, split: &str, clips: usize) -> Vec<SyntheticSample> {
    (0..clips)
        .flat_map(|c| {
            let mut rng = Rng::new(clip_seed(seed, split, c));
            world.gen_real(c % world.cfg.n_base_classes, split_tag(split) | c as u64, &mut rng)
        })
        .collect()
}

fn detection_split(
    world: &Generator,
    seed: u64,
    split: &str,
    clips: usize,
    families: &[ArtifactFamily],
) -> Result<Vec<SyntheticSample>> {
    let cfg = &world.cfg;
    let mut out = Vec::with_capacity(clips * cfg.clip_size);
    let levels = usize::from(cfg.fake_level_max - cfg.fake_level_min) + 1;
    for c in 0..clips {
        let mut rng = Rng::new(clip_seed(seed, split, c));
        let class = (c / 2) % cfg.n_base_classes;
        let clip = world.gen_real(class, split_tag(split) | c as u64, &mut rng);
        if c % 2 == 0 {
            out.extend(clip);
        } else {
            let family = families[(c / 2) % families.len()];
            let level = cfg.fake_level_min + rng.below(levels) as u8;
            for s in &clip {
                out.push(world.apply_artifact(s, family, level, &mut rng)?);
            }
        }
    }
    Ok(out)
}

pub fn build_splits(cfg: &DataConfig, dims: Dims, seed: u64) -> Result<Splits> {
    cfg.validate()?;
    let seed = cfg.seed.unwrap_or(seed);
    let w = Generator::new(cfg, dims, seed)?;
    let splits = Splits {
        pretrain_train: real_split(&w, seed, "pretrain_train", cfg.pretrain_clips),
        pretrain_test: real_split(&w, seed, "pretrain_test", cfg.pretrain_test_clips),
        finetune_train: detection_split(&w, seed, "finetune_train", cfg.finetune_train_clips, &cfg.families_train)?,
        test_in_domain: detection_split(&w, seed, "test_in_domain", cfg.test_clips, &cfg.families_train)?,
        test_heldout: detection_split(&w, seed, "test_heldout", cfg.heldout_clips, &cfg.families_heldout)?,
    };
    check_family_leakage(cfg, &splits)?;
    Ok(splits)
}

/// Checks that each split only holds the families it is allowed, that
/// metadata matches labels, and that no clip id is shared between splits.
pub fn check_family_leakage(cfg: &DataConfig, splits: &Splits) -> Result<()> {
    let mut seen: HashMap<u64, &str> = HashMap::new();
    for (name, samples) in splits.named() {
        let allowed: &[ArtifactFamily] = match name {
            "finetune_train" | "test_in_domain" => &cfg.families_train,
            "test_heldout" => &cfg.families_heldout,
            _ => &[],
        };
        for s in samples {
            let ok = match (s.label, s.family, s.intensity) {
                (0, None, None) => true,
                (1, Some(f), Some(_)) => allowed.contains(&f),
                _ => false,
            };
            if !ok {
                return Err(MasmError::Leakage(format!(
                    "{name}: clip {} has label {} with family {:?}",
                    s.clip_id, s.label, s.family
                )));
            }
            if let Some(other) = seen.insert(s.clip_id, name).filter(|o| *o != name) {
                return Err(MasmError::Leakage(format!("clip {} appears in {other} and {name}", s.clip_id)));
            }
        }
    }
    Ok(())
}

/// One robustness cell: every in-domain test sample distorted by `family` at `level`.
pub fn robustness_cell(test: &[SyntheticSample], family: ArtifactFamily, level: u8, seed: u64) -> Result<Vec<SyntheticSample>> {
    let base = seed.wrapping_add(stable_hash(&format!("robustness/{family}/{level}")));
    test.iter()
        .enumerate()
        .map(|(i, s)| distort(s, family, level, &mut Rng::new(base.wrapping_add(i as u64))))
        .collect()
}

const CSV_HEAD: [&str; 5] = ["clip_id", "label", "family", "intensity", "base_class"];

/// Writes samples as CSV; token values use 17 significant digits.
pub fn write_csv<W: std::io::Write>(samples: &[SyntheticSample], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let width = samples.first().map_or(0, |s| s.tokens.data().len());
    let mut header: Vec<String> = CSV_HEAD.iter().map(|s| s.to_string()).collect();
    if let Some(s) = samples.first() {
        for t in 0..s.tokens.rows() {
            for j in 0..s.tokens.cols() {
                header.push(format!("t{t}_f{j}"));
            }
        }
    }
    wr.write_record(&header)?;
    for s in samples {
        if s.tokens.data().len() != width {
            return Err(MasmError::Shape("samples of mixed shape in one CSV".into()));
        }
        let mut row = vec![
            s.clip_id.to_string(),
            s.label.to_string(),
            s.family.map_or(String::new(), |f| f.name().to_string()),
            s.intensity.map_or(String::new(), |i| i.to_string()),
            s.base_class.to_string(),
        ];
        row.extend(s.tokens.data().iter().map(|v| format!("{v:.16e}")));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(r: R, dims: Dims) -> Result<Vec<SyntheticSample>> {
    let mut rd = csv::Reader::from_reader(r);
    let width = dims.n_tokens * dims.d_model;
    let bad = |what: &str| MasmError::Shape(format!("dataset CSV: {what}"));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != CSV_HEAD.len() + width {
            return Err(bad(&format!("row has {} fields, expected {}", rec.len(), CSV_HEAD.len() + width)));
        }
        let clip_id = rec[0].parse().map_err(|_| bad("clip_id"))?;
        let label = rec[1].parse().map_err(|_| bad("label"))?;
        let family = match &rec[2] {
            "" => None,
            f => Some(f.parse()?),
        };
        let intensity = match &rec[3] {
            "" => None,
            i => Some(i.parse().map_err(|_| bad("intensity"))?),
        };
        let base_class = rec[4].parse().map_err(|_| bad("base_class"))?;
        let values = rec.iter().skip(CSV_HEAD.len()).map(|v| v.parse::<f64>().map_err(|_| bad("token value"))).collect::<Result<Vec<_>>>()?;
        out.push(SyntheticSample {
            tokens: Matrix::from_vec(dims.n_tokens, dims.d_model, values)?,
            label,
            base_class,
            family,
            intensity,
            clip_id,
        });
    }
    Ok(out)
}

pub fn export_splits(splits: &Splits, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, samples) in splits.named() {
        write_csv(samples, std::fs::File::create(dir.join(format!("{name}.csv")))?)?;
    }
    Ok(())
}
