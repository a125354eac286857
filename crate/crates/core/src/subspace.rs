//! Splitting a pretrained weight into a frozen semantic subspace plus `K`
//! trainable artifact subspaces, and putting it back together.
//!
//! Weights are stored output-major: `W` is `d_out x d_in` and a row vector
//! `x` maps to `x W^T`. The SVD `W = U diag(s) V^T` is cut after the top `r`
//! components; the remaining tail is split into `K` contiguous blocks in
//! descending spectral order, each becoming an independent `(U_k, s_k, V_k)`.

use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{MasmError, Result};
use crate::tensor::{frobenius_sq, svd, vector_to_matrix, Matrix};

/// How many leading singular components form the semantic subspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPolicy {
    /// Exactly `r` components.
    Fixed(usize),
    /// Smallest `r` capturing at least this fraction of `sum sigma^2`.
    Energy(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecompositionConfig {
    pub rank_policy: RankPolicy,
    /// Number of artifact subspaces.
    pub k: usize,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        DecompositionConfig { rank_policy: RankPolicy::Energy(0.9), k: 5 }
    }
}

impl DecompositionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(MasmError::Config("decomposition.k must be >= 1".into()));
        }
        match self.rank_policy {
            RankPolicy::Fixed(0) => Err(MasmError::Config("fixed semantic rank must be >= 1".into())),
            RankPolicy::Energy(t) if !(t > 0.0 && t <= 1.0) => {
                Err(MasmError::Config(format!("energy fraction {t} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Semantic rank for a descending spectrum.
    pub fn resolve_rank(&self, singular_values: &[f64]) -> Result<usize> {
        self.validate()?;
        let rank = singular_values.len();
        let total: f64 = singular_values.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return Err(MasmError::RankPolicy("all-zero spectrum has no semantic directions".into()));
        }
        if rank < self.k + 1 {
            return Err(MasmError::RankPolicy(format!(
                "rank {rank} cannot hold a semantic subspace plus {} artifact subspaces",
                self.k
            )));
        }
        let max_r = rank - self.k;
        match self.rank_policy {
            RankPolicy::Fixed(r) if r > max_r => Err(MasmError::RankPolicy(format!(
                "fixed r = {r} leaves fewer than K = {} tail components (R = {rank})",
                self.k
            ))),
            RankPolicy::Fixed(r) => Ok(r),
            RankPolicy::Energy(tau) => {
                let target = tau * total;
                let mut acc = 0.0;
                let mut r = rank;
                for (i, s) in singular_values.iter().enumerate() {
                    acc += s * s;
                    if acc >= target {
                        r = i + 1;
                        break;
                    }
                }
                Ok(r.clamp(1, max_r))
            }
        }
    }
}

/// Splits tail indices `r..rank` (0-based) into `k` contiguous blocks; earlier
/// blocks take the remainder.
pub fn partition_tail(rank: usize, r: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 || r > rank || rank - r < k {
        return Err(MasmError::RankPolicy(format!(
            "cannot split {} tail components of R = {rank} (r = {r}) into K = {k} blocks",
            rank.saturating_sub(r)
        )));
    }
    let len = rank - r;
    let (base, rem) = (len / k, len % k);
    let mut start = r;
    Ok((0..k)
        .map(|i| {
            let size = base + usize::from(i < rem);
            let block = start..start + size;
            start += size;
            block
        })
        .collect())
}

/// Frozen top-`r` part of a decomposed weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticSubspace {
    u: Matrix,
    s: Vec<f64>,
    v: Matrix,
    w_sem: Matrix,
}

impl SemanticSubspace {
    fn new(u: Matrix, s: Vec<f64>, v: Matrix) -> Self {
        let w_sem = u.scale_columns(&s).matmul_t(&v);
        SemanticSubspace { u, s, v, w_sem }
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.s
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    /// Cached `U diag(s) V^T`.
    pub fn weight(&self) -> &Matrix {
        &self.w_sem
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// U, s, V blobs in checkpoint layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.u.write_to(&mut buf).expect("vec write");
        vector_to_matrix(&self.s).write_to(&mut buf).expect("vec write");
        self.v.write_to(&mut buf).expect("vec write");
        buf
    }
}

/// One trainable artifact triple. `s` is an unconstrained real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactSubspace {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl ArtifactSubspace {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn param_len(&self) -> usize {
        self.u.data().len() + self.s.len() + self.v.data().len()
    }

    pub fn weight(&self) -> Matrix {
        self.u.scale_columns(&self.s).matmul_t(&self.v)
    }
}

/// Per-layer manifest entry written ahead of the factor blobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub layer_id: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub r: usize,
    pub artifact_ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedLayer {
    pub layer_id: usize,
    semantic: SemanticSubspace,
    pub artifacts: Vec<ArtifactSubspace>,
    pretrained_frob_sq: f64,
}

pub fn decompose(w: &Matrix, cfg: &DecompositionConfig, layer_id: usize) -> Result<DecomposedLayer> {
    let full = svd(w)?;
    let r = cfg.resolve_rank(&full.singular_values)?;
    let blocks = partition_tail(full.rank(), r, cfg.k)?;
    let semantic = SemanticSubspace::new(
        full.u.columns(0..r),
        full.singular_values[..r].to_vec(),
        full.v.columns(0..r),
    );
    let artifacts = blocks
        .into_iter()
        .map(|b| ArtifactSubspace {
            u: full.u.columns(b.clone()),
            s: full.singular_values[b.clone()].to_vec(),
            v: full.v.columns(b),
        })
        .collect();
    Ok(DecomposedLayer { layer_id, semantic, artifacts, pretrained_frob_sq: frobenius_sq(w)? })
}

impl DecomposedLayer {
    pub fn semantic(&self) -> &SemanticSubspace {
        &self.semantic
    }

    pub fn k(&self) -> usize {
        self.artifacts.len()
    }

    pub fn d_out(&self) -> usize {
        self.semantic.u.rows()
    }

    pub fn d_in(&self) -> usize {
        self.semantic.v.rows()
    }

    /// `||W||_F^2` of the weight this layer was decomposed from.
    pub fn pretrained_frob_sq(&self) -> f64 {
        self.pretrained_frob_sq
    }

    /// Effective weight `W_sem + sum_k U_k diag(s_k) V_k^T`.
    pub fn recompose(&self) -> Result<Matrix> {
        let (d_out, d_in) = (self.d_out(), self.d_in());
        let mut w = self.semantic.w_sem.clone();
        for (k, a) in self.artifacts.iter().enumerate() {
            if a.u.shape() != (d_out, a.s.len()) || a.v.shape() != (d_in, a.s.len()) {
                return Err(MasmError::Shape(format!(
                    "artifact {k} of layer {}: U {:?}, s {}, V {:?} against {d_out}x{d_in}",
                    self.layer_id,
                    a.u.shape(),
                    a.s.len(),
                    a.v.shape()
                )));
            }
            w.add_assign(&a.weight());
        }
        Ok(w)
    }

    pub fn param_len(&self) -> usize {
        self.artifacts.iter().map(ArtifactSubspace::param_len).sum()
    }

    /// Trainable values flattened as `[U_1, s_1, V_1, U_2, ...]`, row-major.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for a in &self.artifacts {
            out.extend_from_slice(a.u.data());
            out.extend_from_slice(&a.s);
            out.extend_from_slice(a.v.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(MasmError::Shape(format!(
                "layer {} expects {} parameters, got {}",
                self.layer_id,
                self.param_len(),
                flat.len()
            )));
        }
        let mut off = 0;
        for a in &mut self.artifacts {
            for dst in [a.u.data_mut(), a.s.as_mut_slice(), a.v.data_mut()] {
                dst.copy_from_slice(&flat[off..off + dst.len()]);
                off += dst.len();
            }
        }
        Ok(())
    }

    /// Chains a gradient with respect to the effective weight down to the
    /// artifact factors, in [`flat_params`](Self::flat_params) order.
    pub fn factor_grads(&self, d_weight: &Matrix) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for a in &self.artifacts {
            let dw_v = d_weight.matmul(&a.v); // d_out x r_k
            let dwt_u = d_weight.t_matmul(&a.u); // d_in x r_k
            out.extend_from_slice(dw_v.scale_columns(&a.s).data());
            out.extend((0..a.rank()).map(|j| (0..a.u.rows()).map(|i| a.u[(i, j)] * dw_v[(i, j)]).sum::<f64>()));
            out.extend_from_slice(dwt_u.scale_columns(&a.s).data());
        }
        out
    }

    /// Share of `sum s^2` held by the semantic block and by each artifact block.
    pub fn energy_fractions(&self) -> (f64, Vec<f64>) {
        let sq = |s: &[f64]| s.iter().map(|x| x * x).sum::<f64>();
        let sem = sq(&self.semantic.s);
        let arts: Vec<f64> = self.artifacts.iter().map(|a| sq(&a.s)).collect();
        let total = sem + arts.iter().sum::<f64>();
        (sem / total, arts.into_iter().map(|e| e / total).collect())
    }

    pub fn manifest(&self) -> LayerManifest {
        LayerManifest {
            layer_id: self.layer_id,
            d_out: self.d_out(),
            d_in: self.d_in(),
            r: self.semantic.rank(),
            artifact_ranks: self.artifacts.iter().map(ArtifactSubspace::rank).collect(),
        }
    }

    /// Writes semantic U, s, V then each artifact's U, s, V. The cached
    /// pretrained energy is written last as a 1x1 blob.
    pub fn write_blobs<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.semantic.to_bytes())?;
        for a in &self.artifacts {
            a.u.write_to(w)?;
            vector_to_matrix(&a.s).write_to(w)?;
            a.v.write_to(w)?;
        }
        vector_to_matrix(&[self.pretrained_frob_sq]).write_to(w)
    }

    pub fn read_blobs<R: Read>(manifest: &LayerManifest, r: &mut R) -> Result<Self> {
        let expect = |m: &Matrix, shape: (usize, usize), what: &str| -> Result<()> {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(MasmError::Checkpoint(format!(
                    "layer {} {what}: expected {:?}, found {:?}",
                    manifest.layer_id,
                    shape,
                    m.shape()
                )))
            }
        };
        let (d_out, d_in, rank) = (manifest.d_out, manifest.d_in, manifest.r);
        let u = Matrix::read_from(r)?;
        expect(&u, (d_out, rank), "semantic U")?;
        let s = Matrix::read_from(r)?;
        expect(&s, (1, rank), "semantic s")?;
        let v = Matrix::read_from(r)?;
        expect(&v, (d_in, rank), "semantic V")?;
        let semantic = SemanticSubspace::new(u, s.into_vec(), v);
        let mut artifacts = Vec::with_capacity(manifest.artifact_ranks.len());
        for &rk in &manifest.artifact_ranks {
            let u = Matrix::read_from(r)?;
            expect(&u, (d_out, rk), "artifact U")?;
            let s = Matrix::read_from(r)?;
            expect(&s, (1, rk), "artifact s")?;
            let v = Matrix::read_from(r)?;
            expect(&v, (d_in, rk), "artifact V")?;
            artifacts.push(ArtifactSubspace { u, s: s.into_vec(), v });
        }
        let e = Matrix::read_from(r)?;
        expect(&e, (1, 1), "pretrained energy")?;
        Ok(DecomposedLayer { layer_id: manifest.layer_id, semantic, artifacts, pretrained_frob_sq: e.data()[0] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{relative_residual, Rng};

    fn one_based(blocks: &[Range<usize>]) -> Vec<(usize, usize)> {
        blocks.iter().map(|b| (b.start + 1, b.end)).collect()
    }

    #[test]
    fn partition_examples() {
        assert_eq!(one_based(&partition_tail(10, 4, 3).unwrap()), vec![(5, 6), (7, 8), (9, 10)]);
        assert_eq!(one_based(&partition_tail(10, 3, 3).unwrap()), vec![(4, 6), (7, 8), (9, 10)]);
        assert_eq!(one_based(&partition_tail(5, 4, 1).unwrap()), vec![(5, 5)]);
    }

    #[test]
    fn partition_rejects_short_tail() {
        let err = partition_tail(5, 4, 2).unwrap_err();
        assert!(matches!(err, MasmError::RankPolicy(_)));
        assert!(err.to_string().contains("rank_policy"));
    }

    #[test]
    fn diag_example() {
        let w = Matrix::from_diag(&[4.0, 2.0, 1.0]);
        let cfg = DecompositionConfig { rank_policy: RankPolicy::Fixed(1), k: 2 };
        let layer = decompose(&w, &cfg, 0).unwrap();
        assert_eq!(layer.semantic().weight(), &Matrix::from_diag(&[4.0, 0.0, 0.0]));
        assert_eq!(layer.artifacts[0].s, vec![2.0]);
        assert_eq!(layer.artifacts[1].s, vec![1.0]);
        assert!(relative_residual(&layer.recompose().unwrap(), &w) <= 1e-12);
    }

    #[test]
    fn zero_matrix_rejected() {
        let cfg = DecompositionConfig { rank_policy: RankPolicy::Fixed(1), k: 1 };
        assert!(matches!(decompose(&Matrix::zeros(3, 3), &cfg, 0), Err(MasmError::RankPolicy(_))));
        assert!(decompose(&Matrix::zeros(3, 3), &DecompositionConfig::default(), 0).is_err());
    }

    #[test]
    fn energy_policy_matches_cumulative_scan() {
        let mut rng = Rng::new(21);
        let w = Matrix::from_fn(16, 16, |_, _| rng.normal());
        let cfg = DecompositionConfig { rank_policy: RankPolicy::Energy(0.9), k: 5 };
        let s = svd(&w).unwrap().singular_values;
        // independent scan: first prefix whose energy reaches 90%
        let total: f64 = s.iter().map(|x| x * x).sum();
        let mut expected = 0;
        while s[..expected].iter().map(|x| x * x).sum::<f64>() < 0.9 * total {
            expected += 1;
        }
        let expected = expected.min(16 - 5).max(1);
        let layer = decompose(&w, &cfg, 3).unwrap();
        assert_eq!(layer.semantic().rank(), expected);
        assert_eq!(layer.artifacts.iter().map(|a| a.rank()).sum::<usize>() + expected, 16);
    }

    #[test]
    fn zeroed_artifacts_leave_semantic_exactly() {
        let mut rng = Rng::new(2);
        let w = Matrix::from_fn(6, 5, |_, _| rng.normal());
        let mut layer = decompose(&w, &DecompositionConfig { rank_policy: RankPolicy::Fixed(2), k: 2 }, 0).unwrap();
        for a in &mut layer.artifacts {
            a.s.iter_mut().for_each(|s| *s = 0.0);
        }
        assert_eq!(&layer.recompose().unwrap(), layer.semantic().weight());
    }

    #[test]
    fn perturbing_one_singular_value_is_rank_one_change() {
        let mut rng = Rng::new(4);
        let w = Matrix::from_fn(5, 4, |_, _| rng.normal());
        let mut layer = decompose(&w, &DecompositionConfig { rank_policy: RankPolicy::Fixed(1), k: 3 }, 0).unwrap();
        let before = layer.recompose().unwrap();
        let delta = 0.37;
        layer.artifacts[1].s[0] += delta;
        let after = layer.recompose().unwrap();
        let u = layer.artifacts[1].u.column(0);
        let v = layer.artifacts[1].v.column(0);
        let expected = Matrix::from_fn(5, 4, |i, j| delta * u[i] * v[j]);
        assert!(after.sub(&before).sub(&expected).max_abs() < 1e-14);
    }

    #[test]
    fn corrupted_shapes_error() {
        let w = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let mut layer = decompose(&w, &DecompositionConfig { rank_policy: RankPolicy::Fixed(1), k: 1 }, 0).unwrap();
        layer.artifacts[0].s.push(1.0);
        assert!(matches!(layer.recompose(), Err(MasmError::Shape(_))));
    }

    #[test]
    fn flat_params_round_trip_and_blobs() {
        let mut rng = Rng::new(8);
        let w = Matrix::from_fn(4, 6, |_, _| rng.normal());
        let layer = decompose(&w, &DecompositionConfig { rank_policy: RankPolicy::Fixed(1), k: 2 }, 7).unwrap();
        let mut copy = layer.clone();
        let flat: Vec<f64> = layer.flat_params().iter().map(|x| x * 2.0).collect();
        copy.set_flat_params(&flat).unwrap();
        assert_eq!(copy.flat_params(), flat);
        assert!(copy.set_flat_params(&flat[1..]).is_err());

        let mut buf = Vec::new();
        layer.write_blobs(&mut buf).unwrap();
        let back = DecomposedLayer::read_blobs(&layer.manifest(), &mut buf.as_slice()).unwrap();
        assert_eq!(back, layer);
    }

    #[test]
    fn energy_fractions_sum_to_one() {
        let mut rng = Rng::new(12);
        let w = Matrix::from_fn(8, 8, |_, _| rng.normal());
        let layer = decompose(&w, &DecompositionConfig::default(), 0).unwrap();
        let (sem, arts) = layer.energy_fractions();
        assert!((sem + arts.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
