//! Binary checkpoints: an 8-byte magic, a length-prefixed JSON manifest
//! (config echo, stage, step, RNG state, layer layout), then raw matrix blobs.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{MasmError, Result};
use crate::network::{Block, LayerNorm, Model, ModelConfig, Projection};
use crate::subspace::{DecomposedLayer, LayerManifest};
use crate::tensor::{vector_to_matrix, Matrix, RngState};

const MAGIC: &[u8; 8] = b"MASMCKP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerEntry {
    Dense { rows: usize, cols: usize },
    Decomposed(LayerManifest),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    stage: Stage,
    step: u64,
    rng: RngState,
    config: TrainConfig,
    model: ModelConfig,
    head_rows: usize,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Optimizer steps taken in the stage that produced this checkpoint.
    pub step: u64,
    pub rng: RngState,
    pub config: TrainConfig,
    pub model: Model,
}

fn write_vec<W: Write>(v: &[f64], w: &mut W) -> std::io::Result<()> {
    vector_to_matrix(v).write_to(w)
}

fn read_vec<R: Read>(r: &mut R, len: usize, what: &str) -> Result<Vec<f64>> {
    read_matrix(r, (1, len), what).map(Matrix::into_vec)
}

fn read_matrix<R: Read>(r: &mut R, shape: (usize, usize), what: &str) -> Result<Matrix> {
    let m = Matrix::read_from(r)?;
    if m.shape() != shape {
        return Err(MasmError::Checkpoint(format!("{what}: expected {shape:?}, found {:?}", m.shape())));
    }
    Ok(m)
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let layers = self
            .model
            .layers()
            .map(|p| match p {
                Projection::Dense(m) => LayerEntry::Dense { rows: m.rows(), cols: m.cols() },
                Projection::Decomposed(l) => LayerEntry::Decomposed(l.manifest()),
            })
            .collect();
        let manifest = Manifest {
            stage: self.stage,
            step: self.step,
            rng: self.rng.clone(),
            config: self.config.clone(),
            model: self.model.config,
            head_rows: self.model.head.rows(),
            layers,
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let m = &self.model;
        m.token_embed.write_to(w)?;
        for b in &m.blocks {
            for v in [&b.ln1.gamma, &b.ln1.beta, &b.ln2.gamma, &b.ln2.beta] {
                write_vec(v, w)?;
            }
            b.mlp_in.write_to(w)?;
            b.mlp_out.write_to(w)?;
            for p in &b.proj {
                match p {
                    Projection::Dense(x) => x.write_to(w)?,
                    Projection::Decomposed(l) => l.write_blobs(w)?,
                }
            }
        }
        m.head.write_to(w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MasmError::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(MasmError::Checkpoint(format!("manifest of {len} bytes")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mc = manifest.model;
        mc.validate()?;
        if manifest.layers.len() != mc.n_layers() {
            return Err(MasmError::Checkpoint(format!(
                "{} layer entries for {} layers",
                manifest.layers.len(),
                mc.n_layers()
            )));
        }
        let d = mc.d_model;
        let token_embed = read_matrix(r, (d, d), "token_embed")?;
        let mut blocks = Vec::with_capacity(mc.n_blocks);
        for bi in 0..mc.n_blocks {
            let ln1 = LayerNorm { gamma: read_vec(r, d, "ln1.gamma")?, beta: read_vec(r, d, "ln1.beta")? };
            let ln2 = LayerNorm { gamma: read_vec(r, d, "ln2.gamma")?, beta: read_vec(r, d, "ln2.beta")? };
            let mlp_in = read_matrix(r, (mc.d_ff, d), "mlp_in")?;
            let mlp_out = read_matrix(r, (d, mc.d_ff), "mlp_out")?;
            let mut proj = Vec::with_capacity(4);
            for j in 0..4 {
                let p = match &manifest.layers[4 * bi + j] {
                    LayerEntry::Dense { rows, cols } => Projection::Dense(read_matrix(r, (*rows, *cols), "projection")?),
                    LayerEntry::Decomposed(lm) => Projection::Decomposed(DecomposedLayer::read_blobs(lm, r)?),
                };
                if p.effective()?.shape() != (d, d) {
                    return Err(MasmError::Checkpoint(format!("layer {} is not {d}x{d}", 4 * bi + j)));
                }
                proj.push(p);
            }
            let proj: [Projection; 4] = proj.try_into().expect("four projections read");
            blocks.push(Block { ln1, proj, ln2, mlp_in, mlp_out });
        }
        let head = read_matrix(r, (manifest.head_rows, d + 1), "head")?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(MasmError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            stage: manifest.stage,
            step: manifest.step,
            rng: manifest.rng,
            config: manifest.config,
            model: Model { config: mc, token_embed, blocks, head },
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
