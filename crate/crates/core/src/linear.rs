//! Linear alignment `E_L A ≈ E_S` fitted by (optionally ridge-regularized) least squares.
//!
//! The map uses the row-vector convention: a local row `x` (length p) maps to
//! `x · A` (length q), so `A` is `p x q`.
//!
//! The fit never forms `(E_Lᵀ E_L)⁻¹`. It runs a Householder QR on the augmented
//! system `[E_L; √λ I] A = [E_S; 0]`, which minimizes
//! `‖E_L A − E_S‖²_F + λ‖A‖²_F` without squaring the condition number.

use serde::{Deserialize, Serialize};

use crate::embedding::{AlignmentPairs, EmbeddingSet, LABEL_APPROX};
use crate::error::{Error, Result};

/// Pivot ratio below which an unregularized fit is reported as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    matrix: Vec<f32>,
    source_dim: usize,
    target_dim: usize,
    ridge_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitWarning {
    /// Fewer pairs than source dimensions; the solution leans on the ridge term.
    Underdetermined { pairs: usize, source_dim: usize },
}

impl std::fmt::Display for FitWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitWarning::Underdetermined { pairs, source_dim } => write!(
                f,
                "underdetermined fit: {pairs} pairs for {source_dim} source dimensions"
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub map: LinearMap,
    pub warnings: Vec<FitWarning>,
}

impl LinearMap {
    /// `matrix` is row-major `source_dim x target_dim`.
    pub fn new(
        matrix: Vec<f32>,
        source_dim: usize,
        target_dim: usize,
        ridge_lambda: f64,
    ) -> Result<Self> {
        if source_dim == 0 || target_dim == 0 {
            return Err(Error::InvalidArgument("linear map dims must be positive".into()));
        }
        if matrix.len() != source_dim * target_dim {
            return Err(Error::DimensionMismatch {
                context: "linear map coefficients",
                expected: source_dim * target_dim,
                actual: matrix.len(),
            });
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::Degenerate("linear map has non-finite coefficients".into()));
        }
        if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ridge_lambda must be finite and non-negative, got {ridge_lambda}"
            )));
        }
        Ok(Self {
            matrix,
            source_dim,
            target_dim,
            ridge_lambda,
        })
    }

    pub fn scaled_identity(dim: usize, scale: f32) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = scale;
        }
        Self::new(matrix, dim, dim, 0.0).expect("identity is well formed")
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn ridge_lambda(&self) -> f64 {
        self.ridge_lambda
    }

    pub fn entry(&self, row: usize, col: usize) -> f32 {
        self.matrix[row * self.target_dim + col]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
    }

    /// Maps one local row vector into the target space.
    pub fn map_row(&self, x: &[f32], out: &mut [f32]) {
        let mut acc = vec![0.0f64; self.target_dim];
        for (i, &xi) in x.iter().enumerate() {
            let xi = xi as f64;
            let coeffs = &self.matrix[i * self.target_dim..(i + 1) * self.target_dim];
            for (a, &c) in acc.iter_mut().zip(coeffs) {
                *a += xi * c as f64;
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
}

/// Solves `min ‖E_L A − E_S‖²_F + ridge_lambda · ‖A‖²_F`.
pub fn fit_linear(pairs: &AlignmentPairs, ridge_lambda: f64) -> Result<LinearFit> {
    pairs.ensure_valid()?;
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "ridge_lambda must be finite and non-negative, got {ridge_lambda}"
        )));
    }
    let (m, p, q) = (pairs.len(), pairs.local.dim(), pairs.server.dim());
    let mut warnings = Vec::new();
    if m < p {
        warnings.push(FitWarning::Underdetermined {
            pairs: m,
            source_dim: p,
        });
    }

    // Column-major augmented system with n = m + p rows.
    let n = m + p;
    let mut x = vec![0.0f64; n * p];
    let mut y = vec![0.0f64; n * q];
    for (r, row) in pairs.local.rows().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            x[c * n + r] = v as f64;
        }
    }
    for (r, row) in pairs.server.rows().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            y[c * n + r] = v as f64;
        }
    }
    let sqrt_lambda = ridge_lambda.sqrt();
    for c in 0..p {
        x[c * n + m + c] = sqrt_lambda;
    }

    let diag = householder_qr(&mut x, &mut y, n, p, q);

    let max_pivot = diag.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
    let min_pivot = diag.iter().fold(f64::INFINITY, |acc, d| acc.min(d.abs()));
    let ratio = if max_pivot > 0.0 { min_pivot / max_pivot } else { 0.0 };
    if ratio <= RANK_TOLERANCE || !ratio.is_finite() {
        return Err(Error::RankDeficient { ratio });
    }

    // Back substitution R A = (Qᵀ Y)[..p], one target column at a time.
    let mut a = vec![0.0f64; p * q];
    for col in 0..q {
        let rhs = &y[col * n..col * n + p];
        for i in (0..p).rev() {
            let mut s = rhs[i];
            for k in i + 1..p {
                s -= x[k * n + i] * a[k * q + col];
            }
            a[i * q + col] = s / x[i * n + i];
        }
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient { ratio });
    }
    let map = LinearMap::new(
        a.into_iter().map(|v| v as f32).collect(),
        p,
        q,
        ridge_lambda,
    )?;
    Ok(LinearFit { map, warnings })
}

/// In-place Householder QR of the column-major `n x p` matrix `x`, applying the
/// same reflections to the `n x q` matrix `y`. Leaves R in the upper triangle of
/// `x` and returns its diagonal.
fn householder_qr(x: &mut [f64], y: &mut [f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut diag = Vec::with_capacity(p);
    let mut v = vec![0.0f64; n];
    for j in 0..p {
        let col = &x[j * n..(j + 1) * n];
        let norm = col[j..].iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm == 0.0 {
            diag.push(0.0);
            continue;
        }
        let alpha = if col[j] > 0.0 { -norm } else { norm };
        v[j..].copy_from_slice(&col[j..]);
        v[j] -= alpha;
        let vnorm2 = v[j..].iter().map(|t| t * t).sum::<f64>();
        if vnorm2 > 0.0 {
            let reflect = |c: &mut [f64]| {
                let s = 2.0 * v[j..].iter().zip(&c[j..]).map(|(a, b)| a * b).sum::<f64>() / vnorm2;
                for (ci, vi) in c[j..].iter_mut().zip(&v[j..]) {
                    *ci -= s * vi;
                }
            };
            for c in j + 1..p {
                reflect(&mut x[c * n..(c + 1) * n]);
            }
            for c in 0..q {
                reflect(&mut y[c * n..(c + 1) * n]);
            }
        }
        x[j * n + j] = alpha;
        for t in &mut x[j * n + j + 1..(j + 1) * n] {
            *t = 0.0;
        }
        diag.push(alpha);
    }
    diag
}

pub fn apply_linear(map: &LinearMap, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.dim() != map.source_dim {
        return Err(Error::DimensionMismatch {
            context: "input set dim vs linear map source dim",
            expected: map.source_dim,
            actual: set.dim(),
        });
    }
    let mut out = vec![0.0f32; set.len() * map.target_dim];
    for (row, dst) in set.rows().zip(out.chunks_exact_mut(map.target_dim)) {
        map.map_row(row, dst);
    }
    EmbeddingSet::from_raw(set.ids().to_vec(), out, map.target_dim, LABEL_APPROX)
}
