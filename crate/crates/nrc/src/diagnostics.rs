//! Evaluation metrics and neighbor-quality statistics: accuracy, per-class
//! recall, and the purity of kNN / reciprocal / non-reciprocal neighbor
//! predictions at increasing K.

use std::io::Write;
use std::path::Path;

use crate::banks::MemoryBanks;
use crate::error::{Error, Result};
use crate::graph::bank_knn;
use crate::numerics::Matrix;

/// Argmax per row; ties go to the lower class index.
pub fn argmax_rows(p: &Matrix) -> Vec<usize> {
    p.iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(p: &Matrix, labels: &[usize]) -> Result<f64> {
    if p.rows() == 0 || labels.len() != p.rows() {
        return Err(Error::invalid("empty input or label count mismatch"));
    }
    let pred = argmax_rows(p);
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Class-wise recalls. Classes absent from `labels` get NaN.
pub fn per_class_accuracy(p: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if p.rows() == 0 || labels.len() != p.rows() {
        return Err(Error::invalid("empty input or label count mismatch"));
    }
    let c = p.cols();
    let pred = argmax_rows(p);
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (&pr, &l) in pred.iter().zip(labels) {
        if l >= c {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        totals[l] += 1;
        if pr == l {
            hits[l] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| {
            if t == 0 {
                f64::NAN
            } else {
                h as f64 / t as f64
            }
        })
        .collect())
}

/// Mean of the class-wise recalls over the classes that appear.
pub fn mean_per_class_accuracy(p: &Matrix, labels: &[usize]) -> Result<f64> {
    let per = per_class_accuracy(p, labels)?;
    let present: Vec<f64> = per.into_iter().filter(|v| !v.is_nan()).collect();
    if present.is_empty() {
        return Err(Error::invalid("no class present"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Fraction of bank rows whose `k` nearest neighbors all share the row's
/// predicted label (predictions read from the score bank snapshot).
pub fn all_k_shared_ratio(banks: &MemoryBanks, k: usize) -> Result<f64> {
    if k == 0 {
        return Ok(1.0);
    }
    let pred = argmax_rows(banks.scores());
    let lists = bank_knn(banks, k, None)?;
    let shared = lists
        .iter()
        .enumerate()
        .filter(|(i, neighbors)| neighbors.iter().all(|&j| pred[j] == pred[*i]))
        .count();
    Ok(shared as f64 / banks.len() as f64)
}

/// Neighbor purity at one neighborhood size.
#[derive(Debug, Clone)]
pub struct PurityRow {
    pub k: usize,
    /// Fraction of kNN edges whose neighbor shares the query's predicted label.
    pub knn_pred: f64,
    /// Same, restricted to reciprocal edges (K = M).
    pub rnn_pred: f64,
    /// Same, restricted to non-reciprocal edges.
    pub nrnn_pred: f64,
    /// Fractions of edges whose neighbor predicts the query's true label.
    pub knn_true: Option<f64>,
    pub rnn_true: Option<f64>,
    pub nrnn_true: Option<f64>,
    /// Fraction of samples whose k neighbors all share the sample's
    /// predicted label.
    pub all_shared: f64,
    /// As `all_shared`, additionally requiring the shared label to be the
    /// sample's true label.
    pub all_shared_correct: Option<f64>,
    /// Fraction of kNN edges that are reciprocal.
    pub rnn_edge_fraction: f64,
}

/// Purity curves for K = 1..=k_max over a bank snapshot.
#[derive(Debug, Clone)]
pub struct NeighborPurityReport {
    pub rows: Vec<PurityRow>,
}

fn ratio(hits: usize, total: usize) -> f64 {
    if total == 0 {
        1.0 // vacuous
    } else {
        hits as f64 / total as f64
    }
}

/// Compute neighbor purity curves. Predicted labels come from the score bank
/// snapshot; `true_labels` (indexed by dataset index) adds the
/// correct-prediction variants. Reciprocity uses M = K.
pub fn neighbor_purity(
    banks: &MemoryBanks,
    k_max: usize,
    true_labels: Option<&[usize]>,
) -> Result<NeighborPurityReport> {
    if k_max == 0 || k_max >= banks.len() {
        return Err(Error::invalid("k_max must lie in [1, bank size)"));
    }
    if let Some(t) = true_labels {
        for &d in banks.dataset_index() {
            if d >= t.len() {
                return Err(Error::invalid("true labels do not cover the bank"));
            }
        }
    }
    let n = banks.len();
    let pred = argmax_rows(banks.scores());
    let truth = true_labels
        .map(|t| -> Vec<usize> { banks.dataset_index().iter().map(|&d| t[d]).collect() });
    let lists = bank_knn(banks, k_max, None)?;

    let mut rows = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let mut knn_edges = 0usize;
        let mut rnn_edges = 0usize;
        let mut knn_shared = 0usize;
        let mut rnn_shared = 0usize;
        let mut nrnn_shared = 0usize;
        let mut knn_correct = 0usize;
        let mut rnn_correct = 0usize;
        let mut nrnn_correct = 0usize;
        let mut all_shared = 0usize;
        let mut all_shared_correct = 0usize;
        for i in 0..n {
            let neighbors = &lists[i][..k];
            let mut sample_all_shared = true;
            for &j in neighbors {
                let reciprocal = lists[j][..k].contains(&i);
                let shares = pred[j] == pred[i];
                let correct = truth.as_ref().is_some_and(|t| pred[j] == t[i]);
                knn_edges += 1;
                knn_shared += shares as usize;
                knn_correct += correct as usize;
                if reciprocal {
                    rnn_edges += 1;
                    rnn_shared += shares as usize;
                    rnn_correct += correct as usize;
                } else {
                    nrnn_shared += shares as usize;
                    nrnn_correct += correct as usize;
                }
                sample_all_shared &= shares;
            }
            if sample_all_shared {
                all_shared += 1;
                if truth.as_ref().is_some_and(|t| pred[i] == t[i]) {
                    all_shared_correct += 1;
                }
            }
        }
        let nrnn_edges = knn_edges - rnn_edges;
        rows.push(PurityRow {
            k,
            knn_pred: ratio(knn_shared, knn_edges),
            rnn_pred: ratio(rnn_shared, rnn_edges),
            nrnn_pred: ratio(nrnn_shared, nrnn_edges),
            knn_true: truth.as_ref().map(|_| ratio(knn_correct, knn_edges)),
            rnn_true: truth.as_ref().map(|_| ratio(rnn_correct, rnn_edges)),
            nrnn_true: truth.as_ref().map(|_| ratio(nrnn_correct, nrnn_edges)),
            all_shared: ratio(all_shared, n),
            all_shared_correct: truth.as_ref().map(|_| ratio(all_shared_correct, n)),
            rnn_edge_fraction: ratio(rnn_edges, knn_edges),
        });
    }
    Ok(NeighborPurityReport { rows })
}

impl NeighborPurityReport {
    /// Emit the curves as CSV for external plotting.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "k,knn_pred,rnn_pred,nrnn_pred,knn_true,rnn_true,nrnn_true,all_shared,all_shared_correct,rnn_edge_fraction"
        )?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.k,
                r.knn_pred,
                r.rnn_pred,
                r.nrnn_pred,
                opt(r.knn_true),
                opt(r.rnn_true),
                opt(r.nrnn_true),
                r.all_shared,
                opt(r.all_shared_correct),
                r.rnn_edge_fraction,
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn accuracy_perfect_and_permuted() {
        let p = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(accuracy(&p, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &[1, 0]).unwrap(), 0.0);
        assert!(accuracy(&Matrix::zeros(0, 2), &[]).is_err());
    }

    #[test]
    fn argmax_tie_breaks_to_lower_class() {
        let p = Matrix::from_rows(&[vec![0.4, 0.4, 0.2]]).unwrap();
        assert_eq!(argmax_rows(&p), vec![0]);
    }

    #[test]
    fn accuracy_matches_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = crate::numerics::softmax_rows(&Matrix::from_vec(20, 3, logits).unwrap()).unwrap();
        let labels: Vec<usize> = (0..20).map(|_| rng.gen_range(0..3)).collect();
        let fast = accuracy(&p, &labels).unwrap();
        let mut hits = 0;
        for i in 0..20 {
            let mut best = 0;
            for j in 1..3 {
                if p.get(i, j) > p.get(i, best) {
                    best = j;
                }
            }
            if best == labels[i] {
                hits += 1;
            }
        }
        assert_eq!(fast, hits as f64 / 20.0);
    }

    #[test]
    fn per_class_recall() {
        let p = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        let per = per_class_accuracy(&p, &[0, 0, 1, 1]).unwrap();
        assert_eq!(per[0], 1.0);
        assert_eq!(per[1], 0.5);
        assert_eq!(mean_per_class_accuracy(&p, &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    fn banks_from_features(features: Matrix, scores: Matrix) -> MemoryBanks {
        // Build real banks by running a model, then overwrite the contents.
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let config = ModelConfig {
            input_dim: features.cols(),
            hidden_dims: vec![],
            feature_dim: features.cols(),
            num_classes: scores.cols(),
            batch_norm: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        };
        let params = ModelParams::init(config, &mut rng).unwrap();
        let mut banks = MemoryBanks::initialize(&params, &features).unwrap();
        let rows: Vec<usize> = (0..features.rows()).collect();
        banks.update(&rows, &features, &scores).unwrap();
        banks
    }

    fn one_hot(rows: &[usize], c: usize) -> Matrix {
        let mut m = Matrix::zeros(rows.len(), c);
        for (i, &l) in rows.iter().enumerate() {
            m.set(i, l, 1.0);
        }
        m
    }

    #[test]
    fn identical_predictions_share_everything() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Matrix::from_vec(10, 2, data).unwrap();
        let scores = one_hot(&[1; 10], 3);
        let banks = banks_from_features(features, scores);
        let report = neighbor_purity(&banks, 3, None).unwrap();
        for row in &report.rows {
            assert_eq!(row.knn_pred, 1.0);
            assert_eq!(row.rnn_pred, 1.0);
            assert_eq!(row.nrnn_pred, 1.0);
            assert_eq!(row.all_shared, 1.0);
        }
        assert_eq!(all_k_shared_ratio(&banks, 3).unwrap(), 1.0);
    }

    #[test]
    fn separated_pure_clusters_are_fully_pure() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..6 {
            let jitter = 0.01 * i as f64;
            rows.push(vec![1.0, jitter]);
            labels.push(0usize);
        }
        for i in 0..6 {
            let jitter = 0.01 * i as f64;
            rows.push(vec![-1.0, 10.0 + jitter]);
            labels.push(1usize);
        }
        let features = Matrix::from_rows(&rows).unwrap();
        let scores = one_hot(&labels, 2);
        let banks = banks_from_features(features, scores);
        let report = neighbor_purity(&banks, 3, Some(&labels)).unwrap();
        for row in &report.rows {
            assert_eq!(row.knn_pred, 1.0);
            assert_eq!(row.knn_true, Some(1.0));
            assert_eq!(row.all_shared, 1.0);
            assert_eq!(row.all_shared_correct, Some(1.0));
        }
    }

    #[test]
    fn purity_matches_recount_oracle_with_random_labels() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Matrix::from_vec(20, 4, data).unwrap();
        let pred_labels: Vec<usize> = (0..20).map(|_| rng.gen_range(0..3)).collect();
        let scores = one_hot(&pred_labels, 3);
        let banks = banks_from_features(features, scores);
        let k = 4;
        let report = neighbor_purity(&banks, k, None).unwrap();

        let lists = bank_knn(&banks, k, None).unwrap();
        for row in &report.rows {
            let kk = row.k;
            let mut knn_edges = 0;
            let mut knn_shared = 0;
            let mut rnn_edges = 0;
            let mut rnn_shared = 0;
            let mut nrnn_shared = 0;
            for i in 0..20 {
                for &j in &lists[i][..kk] {
                    knn_edges += 1;
                    let shares = pred_labels[j] == pred_labels[i];
                    knn_shared += shares as usize;
                    if lists[j][..kk].contains(&i) {
                        rnn_edges += 1;
                        rnn_shared += shares as usize;
                    } else {
                        nrnn_shared += shares as usize;
                    }
                }
            }
            // RNN and nRNN partition the kNN edges.
            assert_eq!(knn_shared, rnn_shared + nrnn_shared);
            assert_eq!(row.knn_pred, knn_shared as f64 / knn_edges as f64);
            if rnn_edges > 0 {
                assert_eq!(row.rnn_pred, rnn_shared as f64 / rnn_edges as f64);
            }
            let nrnn_edges = knn_edges - rnn_edges;
            if nrnn_edges > 0 {
                assert_eq!(row.nrnn_pred, nrnn_shared as f64 / nrnn_edges as f64);
            }
            assert_eq!(row.rnn_edge_fraction, rnn_edges as f64 / knn_edges as f64);
        }
    }

    #[test]
    fn purity_is_invariant_to_sample_reordering() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Matrix::from_vec(15, 4, data).unwrap();
        let labels: Vec<usize> = (0..15).map(|_| rng.gen_range(0..2)).collect();
        let scores = one_hot(&labels, 2);
        let banks = banks_from_features(features.clone(), scores.clone());
        let base = neighbor_purity(&banks, 3, Some(&labels)).unwrap();

        let perm: Vec<usize> = (0..15).rev().collect();
        let perm_features = features.select_rows(&perm).unwrap();
        let perm_scores = scores.select_rows(&perm).unwrap();
        let perm_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let perm_banks = banks_from_features(perm_features, perm_scores);
        let permuted = neighbor_purity(&perm_banks, 3, Some(&perm_labels)).unwrap();

        for (a, b) in base.rows.iter().zip(&permuted.rows) {
            assert!((a.knn_pred - b.knn_pred).abs() < 1e-12);
            assert!((a.rnn_pred - b.rnn_pred).abs() < 1e-12);
            assert!((a.all_shared - b.all_shared).abs() < 1e-12);
        }
    }
}
