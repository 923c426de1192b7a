//! The adaptation objective: neighborhood supervision weighted by affinity,
//! expanded-neighbor supervision, self-regularization, prediction-diversity
//! regularization, and density-weighted supervision, plus the decay schedule
//! for the diversity weight and the composed total.
//!
//! Every term returns its value together with the gradient with respect to
//! the batch probabilities `p`. Bank scores are snapshots and act as
//! constants; gradients flow only into `p`.

use crate::error::{Error, Result};
use crate::graph::NeighborGraph;
use crate::numerics::{dot, Matrix, LOG_FLOOR};

/// Neighborhood supervision: `-(1/n) sum_i sum_{k in N_K(i)} A_ik <S_k, p_i>`.
pub fn loss_n(
    p_batch: &Matrix,
    knn: &[Vec<usize>],
    affinity_a: &[Vec<f64>],
    bank_scores: &Matrix,
) -> Result<(f64, Matrix)> {
    if knn.len() != p_batch.rows() || affinity_a.len() != p_batch.rows() {
        return Err(Error::invalid("graph/batch size mismatch"));
    }
    let n = p_batch.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(p_batch.rows(), p_batch.cols());
    for i in 0..p_batch.rows() {
        let p_i = p_batch.row(i);
        let g_i = grad.row_mut(i);
        for (&k, &a) in knn[i].iter().zip(&affinity_a[i]) {
            let s_k = bank_scores.row(k);
            value -= a * dot(s_k, p_i);
            for (g, &s) in g_i.iter_mut().zip(s_k) {
                *g -= a * s / n;
            }
        }
    }
    Ok((value / n, grad))
}

/// Expanded-neighbor supervision with fixed weight `r`; duplicated expanded
/// neighbors contribute once per occurrence.
pub fn loss_e(
    p_batch: &Matrix,
    expanded: &[Vec<usize>],
    r: f64,
    bank_scores: &Matrix,
) -> Result<(f64, Matrix)> {
    if expanded.len() != p_batch.rows() {
        return Err(Error::invalid("expanded/batch size mismatch"));
    }
    let n = p_batch.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(p_batch.rows(), p_batch.cols());
    for i in 0..p_batch.rows() {
        let p_i = p_batch.row(i);
        let g_i = grad.row_mut(i);
        for &m in &expanded[i] {
            let s_m = bank_scores.row(m);
            value -= r * dot(s_m, p_i);
            for (g, &s) in g_i.iter_mut().zip(s_m) {
                *g -= r * s / n;
            }
        }
    }
    Ok((value / n, grad))
}

/// Self-regularization: `-(1/n) sum_i <S_i, p_i>` with `S_i` the stored
/// snapshot for sample `i`. The gradient is exactly `-S_i / n`.
pub fn loss_self(p_batch: &Matrix, batch_scores: &Matrix) -> Result<(f64, Matrix)> {
    if batch_scores.rows() != p_batch.rows() || batch_scores.cols() != p_batch.cols() {
        return Err(Error::invalid("score snapshot/batch shape mismatch"));
    }
    let n = p_batch.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(p_batch.rows(), p_batch.cols());
    for i in 0..p_batch.rows() {
        value -= dot(batch_scores.row(i), p_batch.row(i));
        for (g, &s) in grad.row_mut(i).iter_mut().zip(batch_scores.row(i)) {
            *g = -s / n;
        }
    }
    Ok((value / n, grad))
}

/// Prediction-diversity regularizer: KL divergence between the batch-mean
/// prediction and the uniform distribution.
pub fn loss_div(p_batch: &Matrix) -> Result<(f64, Matrix)> {
    if p_batch.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let n = p_batch.rows() as f64;
    let c = p_batch.cols() as f64;
    let mut mean = vec![0.0; p_batch.cols()];
    for row in p_batch.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut value = 0.0;
    let mut d_mean = vec![0.0; p_batch.cols()];
    for (j, &m) in mean.iter().enumerate() {
        let floored = m.max(LOG_FLOOR);
        let log_ratio = (floored * c).ln();
        value += m * log_ratio;
        d_mean[j] = log_ratio + if m > LOG_FLOOR { 1.0 } else { 0.0 };
    }
    let mut grad = Matrix::zeros(p_batch.rows(), p_batch.cols());
    for i in 0..p_batch.rows() {
        for (g, &d) in grad.row_mut(i).iter_mut().zip(&d_mean) {
            *g = d / n;
        }
    }
    Ok((value, grad))
}

/// Density-weighted supervision: `-(1/n) sum_i sum_{j in D(i)} B_ij <S_j, p_i>`.
/// Samples with an empty density set contribute nothing.
pub fn loss_d(
    p_batch: &Matrix,
    density: &[Vec<usize>],
    affinity_b: &[Vec<f64>],
    bank_scores: &Matrix,
) -> Result<(f64, Matrix)> {
    if density.len() != p_batch.rows() || affinity_b.len() != p_batch.rows() {
        return Err(Error::invalid("density/batch size mismatch"));
    }
    let n = p_batch.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(p_batch.rows(), p_batch.cols());
    for i in 0..p_batch.rows() {
        let p_i = p_batch.row(i);
        let g_i = grad.row_mut(i);
        for (&j, &b) in density[i].iter().zip(&affinity_b[i]) {
            let s_j = bank_scores.row(j);
            value -= b * dot(s_j, p_i);
            for (g, &s) in g_i.iter_mut().zip(s_j) {
                *g -= b * s / n;
            }
        }
    }
    Ok((value / n, grad))
}

/// Decay weight for the diversity term: `(1 + 10 * iter / max_iter)^-1`.
pub fn lambda_schedule(iter: usize, max_iter: usize) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive"));
    }
    if iter > max_iter {
        return Err(Error::invalid("iter exceeds max_iter"));
    }
    Ok(1.0 / (1.0 + 10.0 * iter as f64 / max_iter as f64))
}

/// Which loss terms are active.
#[derive(Debug, Clone, Copy)]
pub struct LossFlags {
    pub neighborhood: bool,
    pub expanded: bool,
    pub self_regularization: bool,
    pub diversity: bool,
    pub density: bool,
}

impl LossFlags {
    /// Everything on (density included).
    pub fn all() -> Self {
        LossFlags {
            neighborhood: true,
            expanded: true,
            self_regularization: true,
            diversity: true,
            density: true,
        }
    }
}

/// Values of every term for one batch, their weighted total, and the total's
/// gradient with respect to the batch probabilities.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_n: f64,
    pub l_e: f64,
    pub l_self: f64,
    pub l_div: f64,
    pub l_d: f64,
    pub lambda_div: f64,
    pub total: f64,
    pub grad: Matrix,
}

/// Compose the enabled terms: `L = L_N + L_D + L_E + L_self + lambda * L_div`.
/// Disabled terms contribute exactly zero value and gradient.
pub fn total_loss(
    p_batch: &Matrix,
    graph: &NeighborGraph,
    bank_scores: &Matrix,
    batch_scores: &Matrix,
    flags: LossFlags,
    lambda_div: f64,
) -> Result<LossBreakdown> {
    let rows = p_batch.rows();
    let cols = p_batch.cols();
    let mut grad = Matrix::zeros(rows, cols);
    let add = |g: &Matrix, scale: f64, into: &mut Matrix| {
        for (o, &v) in into.data_mut().iter_mut().zip(g.data()) {
            *o += scale * v;
        }
    };

    let mut breakdown = LossBreakdown {
        l_n: 0.0,
        l_e: 0.0,
        l_self: 0.0,
        l_div: 0.0,
        l_d: 0.0,
        lambda_div,
        total: 0.0,
        grad: Matrix::zeros(rows, cols),
    };

    if flags.neighborhood {
        let (v, g) = loss_n(p_batch, &graph.knn, &graph.affinity_a, bank_scores)?;
        breakdown.l_n = v;
        add(&g, 1.0, &mut grad);
    }
    if flags.expanded {
        let (v, g) = loss_e(p_batch, &graph.expanded, graph.r, bank_scores)?;
        breakdown.l_e = v;
        add(&g, 1.0, &mut grad);
    }
    if flags.self_regularization {
        let (v, g) = loss_self(p_batch, batch_scores)?;
        breakdown.l_self = v;
        add(&g, 1.0, &mut grad);
    }
    if flags.diversity {
        let (v, g) = loss_div(p_batch)?;
        breakdown.l_div = v;
        add(&g, lambda_div, &mut grad);
    }
    if flags.density {
        let (v, g) = loss_d(p_batch, &graph.density, &graph.affinity_b, bank_scores)?;
        breakdown.l_d = v;
        add(&g, 1.0, &mut grad);
    }

    breakdown.total = breakdown.l_n
        + breakdown.l_d
        + breakdown.l_e
        + breakdown.l_self
        + lambda_div * breakdown.l_div;
    breakdown.grad = grad;
    Ok(breakdown)
}
