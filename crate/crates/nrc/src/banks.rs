//! Memory banks holding a per-sample snapshot of target features and
//! prediction scores, index-aligned with the dataset.
//!
//! The full-mode bank has one row per target sample. The FIFO mode keeps a
//! fixed-capacity ring in insertion order for large datasets; retrieval then
//! treats the ring as the whole population.
//!
//! Bank contents are plain values: losses read them as constants and no
//! gradient ever flows through them.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankMode {
    Full,
    Fifo { capacity: usize },
}

/// Paired feature bank and score bank. Row `i` of the score matrix was
/// produced from row `i` of the feature matrix by the same forward pass.
#[derive(Debug, Clone)]
pub struct MemoryBanks {
    features: Matrix,
    scores: Matrix,
    /// Originating dataset index of every bank row. Identity in full mode;
    /// in FIFO mode the same dataset index may appear more than once.
    dataset_index: Vec<usize>,
    mode: BankMode,
}

fn validate_rows(z: &Matrix, p: &Matrix, indices: &[usize]) -> Result<()> {
    if z.rows() != indices.len() || p.rows() != indices.len() {
        return Err(Error::invalid("bank update row count mismatch"));
    }
    z.ensure_finite("feature bank update")?;
    p.ensure_finite("score bank update")?;
    for (row_idx, row) in p.iter_rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "score row {row_idx} does not sum to 1 (sum {sum})"
            )));
        }
    }
    Ok(())
}

impl MemoryBanks {
    /// Build full-mode banks with one eval-mode forward pass over the whole
    /// target set.
    pub fn initialize(model: &ModelParams, target: &Matrix) -> Result<Self> {
        if target.rows() == 0 {
            return Err(Error::invalid(
                "cannot build banks from an empty target set",
            ));
        }
        let cache = model.forward_eval(target)?;
        Ok(MemoryBanks {
            features: cache.features().clone(),
            scores: cache.probs().clone(),
            dataset_index: (0..target.rows()).collect(),
            mode: BankMode::Full,
        })
    }

    /// Build a FIFO bank of the given capacity, seeded with an eval-mode pass
    /// over the first `min(capacity, n_t)` target samples in dataset order.
    pub fn initialize_fifo(model: &ModelParams, target: &Matrix, capacity: usize) -> Result<Self> {
        if target.rows() == 0 {
            return Err(Error::invalid(
                "cannot build banks from an empty target set",
            ));
        }
        if capacity == 0 {
            return Err(Error::invalid("fifo capacity must be positive"));
        }
        let seed_len = capacity.min(target.rows());
        let seed_rows: Vec<usize> = (0..seed_len).collect();
        let head = target.select_rows(&seed_rows)?;
        let cache = model.forward_eval(&head)?;
        Ok(MemoryBanks {
            features: cache.features().clone(),
            scores: cache.probs().clone(),
            dataset_index: seed_rows,
            mode: BankMode::Fifo { capacity },
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> BankMode {
        self.mode
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn dataset_index(&self) -> &[usize] {
        &self.dataset_index
    }

    /// Full mode: replace the rows for `indices` with freshly computed values.
    /// All other rows are left bit-identical.
    pub fn update(&mut self, indices: &[usize], z: &Matrix, p: &Matrix) -> Result<Vec<usize>> {
        if self.mode != BankMode::Full {
            return Err(Error::invalid("update requires a full-mode bank"));
        }
        validate_rows(z, p, indices)?;
        for &idx in indices {
            if idx >= self.len() {
                return Err(Error::invalid(format!(
                    "bank index {idx} out of range for {} rows",
                    self.len()
                )));
            }
        }
        for (pos, &idx) in indices.iter().enumerate() {
            self.features.row_mut(idx).copy_from_slice(z.row(pos));
            self.scores.row_mut(idx).copy_from_slice(p.row(pos));
        }
        Ok(indices.to_vec())
    }

    /// FIFO mode: append the batch and evict the oldest entries until the
    /// ring is back within capacity. Returns the bank rows now holding the
    /// pushed entries.
    pub fn fifo_push(&mut self, indices: &[usize], z: &Matrix, p: &Matrix) -> Result<Vec<usize>> {
        let capacity = match self.mode {
            BankMode::Fifo { capacity } => capacity,
            BankMode::Full => return Err(Error::invalid("fifo_push requires a fifo-mode bank")),
        };
        if indices.len() > capacity {
            return Err(Error::invalid(format!(
                "batch of {} exceeds fifo capacity {}",
                indices.len(),
                capacity
            )));
        }
        validate_rows(z, p, indices)?;

        let old_len = self.len();
        let new_len = (old_len + indices.len()).min(capacity);
        let evict = old_len + indices.len() - new_len;

        let d = self.features.cols();
        let c = self.scores.cols();
        let mut features = Matrix::zeros(new_len, d);
        let mut scores = Matrix::zeros(new_len, c);
        let mut dataset_index = Vec::with_capacity(new_len);
        let keep = old_len - evict;
        for (dst, src) in (evict..old_len).enumerate() {
            features
                .row_mut(dst)
                .copy_from_slice(self.features.row(src));
            scores.row_mut(dst).copy_from_slice(self.scores.row(src));
            dataset_index.push(self.dataset_index[src]);
        }
        for (pos, &idx) in indices.iter().enumerate() {
            features.row_mut(keep + pos).copy_from_slice(z.row(pos));
            scores.row_mut(keep + pos).copy_from_slice(p.row(pos));
            dataset_index.push(idx);
        }
        self.features = features;
        self.scores = scores;
        self.dataset_index = dataset_index;
        Ok((keep..new_len).collect())
    }
}
