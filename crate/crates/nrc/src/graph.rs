//! Neighborhood structure over a bank snapshot: k-nearest-neighbor lists by
//! cosine similarity, reciprocity and its affinity weights, expanded
//! (neighbor-of-neighbor) multisets, and reverse-neighbor density sets with
//! their own affinity weights.
//!
//! Retrieval is deterministic: neighbors are ordered by descending similarity
//! and ties are broken by ascending bank index. A sample is never its own
//! neighbor.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::banks::MemoryBanks;
use crate::error::{Error, Result};
use crate::numerics::{axpy, l2_normalize_rows, transpose, Matrix};

/// Hyperparameters for one graph construction.
#[derive(Debug, Clone)]
pub struct GraphParams {
    /// Nearest neighbors per query (N_K).
    pub k: usize,
    /// Neighbors-of-neighbors per neighbor (N_M), also the reverse list size
    /// for the reciprocity check.
    pub m: usize,
    /// Reverse-neighbor list size for density estimation (N_U).
    pub u: usize,
    /// Nearest-neighbor list size used by the density affinity (N_V).
    pub v: usize,
    /// Affinity assigned to non-reciprocal neighbors and to expanded
    /// neighbors.
    pub r: f64,
    /// When false, every affinity is 1 (the ablation that treats all
    /// neighbors equally).
    pub affinity_enabled: bool,
    /// When true, duplicate expanded neighbors are collapsed to one
    /// occurrence (ablation; duplicates are kept by default).
    pub dedupe_expanded: bool,
    /// Build the expanded-neighbor multisets.
    pub with_expanded: bool,
    /// Build density sets and their affinities.
    pub with_density: bool,
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::invalid("K and M must be at least 1"));
        }
        if self.with_density && (self.v == 0 || self.u <= self.v) {
            return Err(Error::invalid("density parameters require U > V >= 1"));
        }
        if !(-1.0..=1.0).contains(&self.r) {
            return Err(Error::invalid("r must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// True when candidate (sim `sa`, index `a`) ranks before (`sb`, `b`):
/// higher similarity first, lower index on ties.
#[inline]
fn ranks_before(sa: f64, a: u32, sb: f64, b: u32) -> bool {
    match sa.total_cmp(&sb) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a < b,
    }
}

/// Queries per gram block; bounds how often the transposed bank streams
/// through the cache.
const QUERY_BLOCK: usize = 8;
/// Bank rows per gram tile; keeps the active similarity slices L1-resident.
const BANK_TILE: usize = 256;

/// Top-k bank rows for each query row. `exclude(q, j)` drops bank row `j`
/// from query `q`'s candidates; `max_excluded` must bound the number of
/// excluded rows for any single query. Inputs must already be L2-normalized.
/// Neighbors come out in descending similarity with ties broken by ascending
/// index.
///
/// Similarities accumulate per query in coordinate order, so they equal the
/// sequential [`dot`] bit for bit; the blocking only reorders independent
/// (query, bank row) pairs.
fn top_k_rows<F>(
    normed_bank: &Matrix,
    normed_queries: &Matrix,
    k: usize,
    max_excluded: usize,
    exclude: F,
) -> Result<Vec<Vec<usize>>>
where
    F: Fn(usize, usize) -> bool + Sync,
{
    let n = normed_bank.rows();
    let d = normed_bank.cols();
    let nq = normed_queries.rows();
    let bank_t = transpose(normed_bank);
    // Select k + max_excluded candidates blindly (the hot loop stays free of
    // the exclusion predicate), then filter.
    let fetch = (k + max_excluded).min(n);
    if k > 0 && fetch == 0 {
        return Err(Error::invalid("empty bank"));
    }
    let block_starts: Vec<usize> = (0..nq.max(1)).step_by(QUERY_BLOCK).collect();
    let nested: Result<Vec<Vec<Vec<usize>>>> = block_starts
        .into_par_iter()
        .map_init(
            || {
                (
                    vec![0.0f64; QUERY_BLOCK * n],
                    Vec::<(f64, u32)>::with_capacity(fetch + 1),
                )
            },
            |(sims, top), block_start| {
                let qb = QUERY_BLOCK.min(nq - block_start);
                sims[..qb * n].fill(0.0);
                let mut tile = 0;
                while tile < n {
                    let tile_end = (tile + BANK_TILE).min(n);
                    for dim in 0..d {
                        let brow = &bank_t.row(dim)[tile..tile_end];
                        for qi in 0..qb {
                            let qv = normed_queries.get(block_start + qi, dim);
                            axpy(&mut sims[qi * n + tile..qi * n + tile_end], qv, brow);
                        }
                    }
                    tile = tile_end;
                }

                let mut lists = Vec::with_capacity(qb);
                for qi in 0..qb {
                    if k == 0 {
                        lists.push(Vec::new());
                        continue;
                    }
                    let q = block_start + qi;
                    let srow = &mut sims[qi * n..qi * n + n];
                    for s in srow.iter_mut() {
                        *s = s.clamp(-1.0, 1.0);
                    }
                    // Bounded selection: `top` is kept sorted best-first, so
                    // most candidates are rejected with one comparison
                    // against the current worst.
                    top.clear();
                    for (j, &s) in srow.iter().enumerate() {
                        let jj = j as u32;
                        if top.len() == fetch {
                            let &(ws, wi) = top.last().expect("fetch > 0");
                            if !ranks_before(s, jj, ws, wi) {
                                continue;
                            }
                            top.pop();
                        }
                        let pos = top.partition_point(|&(ts, ti)| ranks_before(ts, ti, s, jj));
                        top.insert(pos, (s, jj));
                    }
                    let picked: Vec<usize> = top
                        .iter()
                        .map(|&(_, j)| j as usize)
                        .filter(|&j| !exclude(q, j))
                        .take(k)
                        .collect();
                    if picked.len() < k {
                        return Err(Error::invalid(format!(
                            "K = {k} exceeds the available neighbors"
                        )));
                    }
                    lists.push(picked);
                }
                Ok(lists)
            },
        )
        .collect();
    Ok(nested?.into_iter().flatten().collect())
}

/// Indices of the K most cosine-similar bank rows for each query, optionally
/// excluding one bank row per query (the query's own entry).
pub fn knn_indices(
    bank_features: &Matrix,
    queries: &Matrix,
    k: usize,
    exclude: Option<&[usize]>,
) -> Result<Vec<Vec<usize>>> {
    if queries.cols() != bank_features.cols() {
        return Err(Error::invalid("query/bank dimension mismatch"));
    }
    if let Some(e) = exclude {
        if e.len() != queries.rows() {
            return Err(Error::invalid("exclusion map length mismatch"));
        }
    }
    let bank = l2_normalize_rows(bank_features);
    let q = l2_normalize_rows(queries);
    let max_excluded = exclude.is_some() as usize;
    top_k_rows(&bank, &q, k, max_excluded, |qi, j| {
        exclude.is_some_and(|e| e[qi] == j)
    })
}

/// Self-excluded kNN lists for a subset of bank rows, where "self" is every
/// bank row sharing the query's dataset index (relevant for FIFO rings that
/// may hold stale duplicates).
fn bank_knn_rows(
    normed_bank: &Matrix,
    dataset_index: &[usize],
    query_rows: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let queries = normed_bank.select_rows(query_rows)?;
    // A query's own dataset index can appear several times in a FIFO ring;
    // budget the selection for the worst case among the queries.
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &d in dataset_index {
        *counts.entry(d).or_insert(0) += 1;
    }
    let max_excluded = query_rows
        .iter()
        .map(|&row| counts.get(&dataset_index[row]).copied().unwrap_or(0))
        .max()
        .unwrap_or(0);
    top_k_rows(normed_bank, &queries, k, max_excluded, |qi, j| {
        dataset_index[j] == dataset_index[query_rows[qi]]
    })
}

/// Self-excluded kNN lists over the bank's own rows ("self" being every row
/// that shares the query's dataset index). `query_rows = None` queries every
/// row.
pub fn bank_knn(
    banks: &MemoryBanks,
    k: usize,
    query_rows: Option<&[usize]>,
) -> Result<Vec<Vec<usize>>> {
    let normed = l2_normalize_rows(banks.features());
    let all_rows: Vec<usize> = (0..banks.len()).collect();
    let rows = query_rows.unwrap_or(&all_rows);
    bank_knn_rows(&normed, banks.dataset_index(), rows, k)
}

/// Per-edge reciprocity mask and the matching affinity weights.
pub type ReciprocityWeights = (Vec<Vec<bool>>, Vec<Vec<f64>>);

/// Reciprocity mask and affinity weights for a batch of queries.
///
/// `m_neighbors[j]` must hold N_M for every bank row `j` appearing in
/// `batch_knn`. Neighbor `j` of query `i` is reciprocal when `i` appears in
/// N_M of `j`; reciprocal neighbors get affinity 1, the rest get `r`.
pub fn affinity_a(
    batch_knn: &[Vec<usize>],
    batch_bank_rows: &[usize],
    m_neighbors: &HashMap<usize, Vec<usize>>,
    r: f64,
) -> Result<ReciprocityWeights> {
    if batch_knn.len() != batch_bank_rows.len() {
        return Err(Error::invalid("batch knn/rows length mismatch"));
    }
    let mut mask = Vec::with_capacity(batch_knn.len());
    let mut aff = Vec::with_capacity(batch_knn.len());
    for (i, neighbors) in batch_knn.iter().enumerate() {
        let me = batch_bank_rows[i];
        let mut m_row = Vec::with_capacity(neighbors.len());
        let mut a_row = Vec::with_capacity(neighbors.len());
        for &j in neighbors {
            let reverse = m_neighbors
                .get(&j)
                .ok_or_else(|| Error::invalid(format!("missing N_M for bank row {j}")))?;
            let reciprocal = reverse.contains(&me);
            m_row.push(reciprocal);
            a_row.push(if reciprocal { 1.0 } else { r });
        }
        mask.push(m_row);
        aff.push(a_row);
    }
    Ok((mask, aff))
}

fn expand_neighbors_by<F>(
    batch_knn: &[Vec<usize>],
    m_neighbors: &HashMap<usize, Vec<usize>>,
    is_ego: F,
    dedupe: bool,
) -> Result<Vec<Vec<usize>>>
where
    F: Fn(usize, usize) -> bool,
{
    let mut out = Vec::with_capacity(batch_knn.len());
    for (i, neighbors) in batch_knn.iter().enumerate() {
        let mut multiset = Vec::new();
        for &j in neighbors {
            let expanded = m_neighbors
                .get(&j)
                .ok_or_else(|| Error::invalid(format!("missing N_M for bank row {j}")))?;
            for &m in expanded {
                if !is_ego(i, m) {
                    multiset.push(m);
                }
            }
        }
        if dedupe {
            multiset.sort_unstable();
            multiset.dedup();
        }
        out.push(multiset);
    }
    Ok(out)
}

/// Expanded neighbors: the multiset union of N_M over each query's K nearest
/// neighbors, with every occurrence of the ego removed. Duplicates are
/// retained unless `dedupe` is set.
pub fn expand_neighbors(
    batch_knn: &[Vec<usize>],
    m_neighbors: &HashMap<usize, Vec<usize>>,
    ego: &[usize],
    dedupe: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_knn.len() != ego.len() {
        return Err(Error::invalid("batch knn/ego length mismatch"));
    }
    expand_neighbors_by(batch_knn, m_neighbors, |i, m| m == ego[i], dedupe)
}

fn invert_knn(knn: &[Vec<usize>], n: usize) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); n];
    for (j, neighbors) in knn.iter().enumerate() {
        for &i in neighbors {
            sets[i].push(j);
        }
    }
    // `j` ascends in the loop above, so each set is already sorted.
    sets
}

/// Density set D(i) for every bank row: the rows that list `i` among their U
/// nearest neighbors. An empty D(i) marks `i` as an outlier.
pub fn density_sets(bank_features: &Matrix, u: usize) -> Result<Vec<Vec<usize>>> {
    let n = bank_features.rows();
    if u >= n {
        return Err(Error::invalid(format!(
            "U = {u} must be smaller than the bank size {n}"
        )));
    }
    let normed = l2_normalize_rows(bank_features);
    let all_rows: Vec<usize> = (0..n).collect();
    let identity: Vec<usize> = all_rows.clone();
    let knn_u = bank_knn_rows(&normed, &identity, &all_rows, u)?;
    Ok(invert_knn(&knn_u, n))
}

/// Density sets restricted to the given query rows, computed over the whole
/// bank: element `q` is D(query_rows[q]). Agrees exactly with
/// [`density_sets`] restricted to those rows when `dataset_index` is the
/// identity.
pub fn density_sets_for_queries(
    bank_features: &Matrix,
    dataset_index: &[usize],
    u: usize,
    query_rows: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let n = bank_features.rows();
    if u >= n {
        return Err(Error::invalid(format!(
            "U = {u} must be smaller than the bank size {n}"
        )));
    }
    let normed = l2_normalize_rows(bank_features);
    let all_rows: Vec<usize> = (0..n).collect();
    let knn_u = bank_knn_rows(&normed, dataset_index, &all_rows, u)?;
    let mut position = HashMap::new();
    for (pos, &row) in query_rows.iter().enumerate() {
        position.insert(row, pos);
    }
    let mut sets = vec![Vec::new(); query_rows.len()];
    for (j, neighbors) in knn_u.iter().enumerate() {
        for &i in neighbors {
            if let Some(&pos) = position.get(&i) {
                sets[pos].push(j);
            }
        }
    }
    Ok(sets)
}

/// Affinity weights for density supervision: for `j` in D(i), weight 1 when
/// `j` is also among the V nearest neighbors of `i`, else `r`. Output is
/// aligned with `density`.
pub fn affinity_b(density: &[Vec<usize>], knn_v: &[Vec<usize>], r: f64) -> Result<Vec<Vec<f64>>> {
    if density.len() != knn_v.len() {
        return Err(Error::invalid("density/knn_v length mismatch"));
    }
    Ok(density
        .iter()
        .zip(knn_v)
        .map(|(d_i, v_i)| {
            d_i.iter()
                .map(|j| if v_i.contains(j) { 1.0 } else { r })
                .collect()
        })
        .collect())
}

/// Neighborhood structure for a set of query rows against a bank snapshot.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    /// Bank rows the graph was built for.
    pub query_rows: Vec<usize>,
    /// N_K per query.
    pub knn: Vec<Vec<usize>>,
    /// N_V per query (empty lists when density is disabled).
    pub knn_v: Vec<Vec<usize>>,
    /// Reciprocity of each entry of `knn`.
    pub reciprocal: Vec<Vec<bool>>,
    /// Affinity of each entry of `knn`: 1 for reciprocal neighbors, `r`
    /// otherwise (all 1 when affinity is disabled).
    pub affinity_a: Vec<Vec<f64>>,
    /// Expanded-neighbor multisets, ego excluded, duplicates retained unless
    /// deduped.
    pub expanded: Vec<Vec<usize>>,
    /// D(i) per query (empty when density is disabled).
    pub density: Vec<Vec<usize>>,
    /// Affinity of each entry of `density`.
    pub affinity_b: Vec<Vec<f64>>,
    /// The `r` the graph was built with (used by the CSV dump).
    pub r: f64,
}

impl NeighborGraph {
    /// A graph with no edges, for runs where no loss term needs
    /// neighborhood structure.
    pub fn empty(query_rows: &[usize], r: f64) -> Self {
        let blank = vec![Vec::new(); query_rows.len()];
        NeighborGraph {
            query_rows: query_rows.to_vec(),
            knn: blank.clone(),
            knn_v: blank.clone(),
            reciprocal: vec![Vec::new(); query_rows.len()],
            affinity_a: vec![Vec::new(); query_rows.len()],
            expanded: blank.clone(),
            density: blank.clone(),
            affinity_b: vec![Vec::new(); query_rows.len()],
            r,
        }
    }

    /// Build the graph for `query_rows` of the bank. Queries are the banks'
    /// own (just updated) rows; entries sharing a query's dataset index are
    /// excluded from its neighbor lists.
    pub fn build(banks: &MemoryBanks, query_rows: &[usize], params: &GraphParams) -> Result<Self> {
        params.validate()?;
        let dataset_index = banks.dataset_index();
        for &row in query_rows {
            if row >= banks.len() {
                return Err(Error::invalid(format!("query row {row} out of range")));
            }
        }
        let normed = l2_normalize_rows(banks.features());

        let k_fetch = if params.with_density {
            params.k.max(params.v)
        } else {
            params.k
        };
        let lists = bank_knn_rows(&normed, dataset_index, query_rows, k_fetch)?;
        let knn: Vec<Vec<usize>> = lists.iter().map(|l| l[..params.k].to_vec()).collect();
        let knn_v: Vec<Vec<usize>> = if params.with_density {
            lists.iter().map(|l| l[..params.v].to_vec()).collect()
        } else {
            vec![Vec::new(); query_rows.len()]
        };

        // N_M for every distinct neighbor, shared by the reciprocity check
        // and the expansion.
        let needs_m = params.affinity_enabled || params.with_expanded;
        let m_neighbors: HashMap<usize, Vec<usize>> = if needs_m {
            let mut distinct: Vec<usize> = knn.iter().flatten().copied().collect();
            distinct.sort_unstable();
            distinct.dedup();
            let lists = bank_knn_rows(&normed, dataset_index, &distinct, params.m)?;
            distinct.into_iter().zip(lists).collect()
        } else {
            HashMap::new()
        };

        let (reciprocal, affinity_a_vals) = if params.affinity_enabled {
            affinity_a(&knn, query_rows, &m_neighbors, params.r)?
        } else {
            (
                knn.iter().map(|l| vec![false; l.len()]).collect(),
                knn.iter().map(|l| vec![1.0; l.len()]).collect(),
            )
        };

        let expanded = if params.with_expanded {
            expand_neighbors_by(
                &knn,
                &m_neighbors,
                |i, m| dataset_index[m] == dataset_index[query_rows[i]],
                params.dedupe_expanded,
            )?
        } else {
            vec![Vec::new(); query_rows.len()]
        };

        let (density, affinity_b_vals) = if params.with_density {
            let density =
                density_sets_for_queries(banks.features(), dataset_index, params.u, query_rows)?;
            let b = if params.affinity_enabled {
                affinity_b(&density, &knn_v, params.r)?
            } else {
                density.iter().map(|d| vec![1.0; d.len()]).collect()
            };
            (density, b)
        } else {
            (
                vec![Vec::new(); query_rows.len()],
                vec![Vec::new(); query_rows.len()],
            )
        };

        Ok(NeighborGraph {
            query_rows: query_rows.to_vec(),
            knn,
            knn_v,
            reciprocal,
            affinity_a: affinity_a_vals,
            expanded,
            density,
            affinity_b: affinity_b_vals,
            r: params.r,
        })
    }

    /// Build over every bank row (diagnostics and dumps).
    pub fn build_full(banks: &MemoryBanks, params: &GraphParams) -> Result<Self> {
        let all: Vec<usize> = (0..banks.len()).collect();
        Self::build(banks, &all, params)
    }

    /// Dump every edge as CSV: query_index, neighbor_index, relation, weight.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "query_index,neighbor_index,relation,weight")?;
        for (qi, &q) in self.query_rows.iter().enumerate() {
            for (t, &j) in self.knn[qi].iter().enumerate() {
                writeln!(w, "{q},{j},knn,{}", self.affinity_a[qi][t])?;
                if self.reciprocal[qi][t] {
                    writeln!(w, "{q},{j},rnn,1")?;
                }
            }
            for &j in &self.expanded[qi] {
                writeln!(w, "{q},{j},expanded,{}", self.r)?;
            }
            for (t, &j) in self.density[qi].iter().enumerate() {
                writeln!(w, "{q},{j},density,{}", self.affinity_b[qi][t])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
