//! Dense row-major matrices and the small numeric kernels the rest of the
//! crate is built on: stable softmax, cosine similarity, and the central
//! finite-difference oracle used by the gradient tests.
//!
//! Everything is `f64`. Sizes here are desk-scale, so clarity wins over
//! BLAS-level tuning.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Denominator floor for cosine similarity; zero-norm vectors get similarity
/// 0 to everything instead of NaN.
pub const COSINE_EPS: f64 = 1e-12;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer. Fails if the buffer length does not
    /// equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("matrix needs at least one row"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::invalid("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Copy the given rows into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            if src >= self.rows {
                return Err(Error::invalid(format!(
                    "row index {src} out of range for {} rows",
                    self.rows
                )));
            }
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// `self * other`, parallelized over output rows.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let oc = other.cols;
        out.data
            .par_chunks_mut(oc)
            .zip(self.data.par_chunks(self.cols))
            .for_each(|(out_row, lhs_row)| {
                for (k, &a) in lhs_row.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let rhs_row = &other.data[k * oc..(k + 1) * oc];
                    for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                        *o += a * b;
                    }
                }
            });
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::invalid(format!(
                "matmul_nt shape mismatch: {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        let oc = other.rows;
        out.data
            .par_chunks_mut(oc)
            .zip(self.data.par_chunks(self.cols))
            .for_each(|(out_row, lhs_row)| {
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o = dot(lhs_row, other.row(j));
                }
            });
        Ok(out)
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::invalid(format!(
                "matmul_tn shape mismatch: ({}x{})^T * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let rhs_row = other.row(i);
            for (k, &a) in lhs_row.iter().enumerate() {
                let out_row = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }
}

/// Plain sequential dot product. Retrieval accumulates similarities in the
/// same coordinate order, so the two routes agree bit for bit.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[j] += scale * row[j]`; the vectorizable kernel behind bulk cosine
/// similarity.
#[inline]
pub(crate) fn axpy(out: &mut [f64], scale: f64, row: &[f64]) {
    for (o, &v) in out.iter_mut().zip(row) {
        *o += scale * v;
    }
}

/// Transpose into a fresh matrix.
pub fn transpose(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.cols(), m.rows());
    for i in 0..m.rows() {
        for (k, &v) in m.row(i).iter().enumerate() {
            out.set(k, i, v);
        }
    }
    out
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-wise softmax with per-row max subtraction.
///
/// Rejects non-finite input; output rows are probability vectors.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    logits.ensure_finite("softmax_rows input")?;
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(out.cols.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Cosine similarity with an epsilon-floored denominator, clamped to [-1, 1].
///
/// Zero-norm vectors are defined to have similarity 0 to everything.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine_similarity length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let sim = dot(a, b) / (l2_norm(a).max(COSINE_EPS) * l2_norm(b).max(COSINE_EPS));
    Ok(sim.clamp(-1.0, 1.0))
}

/// L2-normalize every row, with the same epsilon floor cosine similarity uses.
/// Dot products of normalized rows then equal cosine similarities.
pub fn l2_normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let inv = 1.0 / l2_norm(out.row(r)).max(COSINE_EPS);
        for v in out.row_mut(r) {
            *v *= inv;
        }
    }
    out
}

/// Central finite differences: (f(x + h e_k) - f(x - h e_k)) / 2h for every
/// coordinate. Test oracle for every analytic gradient in the crate.
pub fn finite_difference_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; theta.len()];
    let mut point = theta.to_vec();
    for k in 0..theta.len() {
        let orig = point[k];
        point[k] = orig + h;
        let plus = f(&point);
        point[k] = orig - h;
        let minus = f(&point);
        point[k] = orig;
        grad[k] = (plus - minus) / (2.0 * h);
    }
    grad
}
