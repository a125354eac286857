//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! For `W` of shape `m x n` with `m >= n` the columns of a working copy are
//! rotated pairwise until mutually orthogonal; the accumulated rotations form
//! `V`, the column norms are the singular values and the normalized columns
//! form `U`. Wide inputs are handled by transposing.

use crate::error::{MasmError, Result};
use crate::tensor::matrix::{dot, Matrix};

/// `W = U diag(s) V^T` with `R = min(rows, cols)` components, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `rows x R`, orthonormal columns.
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    /// `cols x R`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_columns(&self.singular_values).matmul_t(&self.v)
    }
}

const SWEEPS_PER_DIM: usize = 100;

pub fn svd(w: &Matrix) -> Result<SvdResult> {
    let (rows, cols) = w.shape();
    if rows == 0 || cols == 0 {
        return Err(MasmError::Shape(format!("svd of empty {rows}x{cols} matrix")));
    }
    w.ensure_finite("svd input")?;
    if rows >= cols {
        jacobi_tall(w, rows, cols)
    } else {
        let t = jacobi_tall(&w.transpose(), cols, rows)?;
        let mut out = SvdResult { u: t.v, singular_values: t.singular_values, v: t.u };
        fix_signs(&mut out);
        Ok(out)
    }
}

fn jacobi_tall(w: &Matrix, rows: usize, cols: usize) -> Result<SvdResult> {
    // column-major working storage
    let mut g: Vec<Vec<f64>> = (0..cols).map(|j| w.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = (rows as f64) * f64::EPSILON;
    let max_sweeps = SWEEPS_PER_DIM * cols;
    let mut converged = cols == 1;
    let mut sweeps = 0;
    while !converged && sweeps < max_sweeps {
        sweeps += 1;
        converged = true;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
    }
    if !converged {
        return Err(MasmError::SvdNoConvergence { rows, cols, sweeps });
    }

    let norms: Vec<f64> = g.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let sigma_max = norms[order[0]];
    let zero_floor = sigma_max * f64::EPSILON * rows as f64;
    let mut u = Matrix::zeros(rows, cols);
    let mut vm = Matrix::zeros(cols, cols);
    let mut singular_values = Vec::with_capacity(cols);
    let mut deficient = Vec::new();
    for (j, &src) in order.iter().enumerate() {
        vm.set_column(j, &v[src]);
        let sigma = norms[src];
        if sigma > zero_floor && sigma > 0.0 {
            let col: Vec<f64> = g[src].iter().map(|x| x / sigma).collect();
            u.set_column(j, &col);
            singular_values.push(sigma);
        } else {
            singular_values.push(0.0);
            deficient.push(j);
        }
    }
    complete_basis(&mut u, &deficient);

    let mut out = SvdResult { u, singular_values, v: vm };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (a, b) = (&mut left[p], &mut right[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed zero columns of `u` with unit vectors orthogonal to every other column.
fn complete_basis(u: &mut Matrix, missing: &[usize]) {
    let rows = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|j| !missing.contains(j)).collect();
    for &j in missing {
        let basis: Vec<Vec<f64>> = filled.iter().map(|&k| u.column(k)).collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for i in 0..rows {
            let mut cand = vec![0.0; rows];
            cand[i] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let proj = dot(&cand, b);
                    for (c, bv) in cand.iter_mut().zip(b) {
                        *c -= proj * bv;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(n, _)| norm > *n) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("rows >= 1");
        let col: Vec<f64> = cand.iter().map(|x| x / norm).collect();
        u.set_column(j, &col);
        filled.push(j);
    }
}

/// First non-negligible entry of each `u` column made nonnegative; `v` follows.
fn fix_signs(res: &mut SvdResult) {
    for j in 0..res.u.cols() {
        let lead = (0..res.u.rows()).map(|i| res.u[(i, j)]).find(|x| x.abs() > f64::EPSILON);
        if matches!(lead, Some(x) if x < 0.0) {
            for i in 0..res.u.rows() {
                res.u[(i, j)] = -res.u[(i, j)];
            }
            for i in 0..res.v.rows() {
                res.v[(i, j)] = -res.v[(i, j)];
            }
        }
    }
}
