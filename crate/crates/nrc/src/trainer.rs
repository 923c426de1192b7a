//! SGD with momentum, source pretraining, and the adaptation loop.
//!
//! Adaptation is source-free by construction: [`adapt`] takes the pretrained
//! parameters and unlabeled target features only. Each iteration samples a
//! batch, runs a forward pass, refreshes the memory banks for the batch,
//! builds the neighborhood graph against the refreshed snapshot, composes the
//! loss, and takes one optimizer step.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::banks::{BankMode, MemoryBanks};
use crate::diagnostics::all_k_shared_ratio;
use crate::error::{Error, Result};
use crate::graph::{GraphParams, NeighborGraph};
use crate::losses::{lambda_schedule, total_loss, LossFlags};
use crate::model::{ForwardMode, ModelConfig, ModelParams};
use crate::numerics::Matrix;

/// Neighbor-list size used for the all-shared diagnostic recorded per epoch.
pub const DIAG_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdaptMode {
    #[serde(rename = "nrc")]
    Nrc,
    #[serde(rename = "nrc++")]
    NrcPlusPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankConfig {
    Full,
    Fifo { capacity: usize },
}

/// Hyperparameters of the adaptation loop. JSON keys mirror the field names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Nearest neighbors per sample.
    pub k: usize,
    /// Expanded neighbors per neighbor (also the reverse list size of the
    /// reciprocity check).
    pub m: usize,
    /// Reverse-neighbor list size for density estimation.
    pub u: usize,
    /// Nearest-neighbor list size for the density affinity.
    pub v: usize,
    /// Affinity of non-reciprocal and expanded neighbors.
    pub r: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_extractor: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: AdaptMode,
    pub bank: BankConfig,
    /// Ablation: treat every neighbor equally (all affinities 1).
    pub disable_affinity: bool,
    /// Ablation: collapse duplicate expanded neighbors.
    pub dedupe_expanded: bool,
    pub disable_loss_n: bool,
    pub disable_loss_e: bool,
    pub disable_loss_self: bool,
    pub disable_loss_div: bool,
    pub disable_loss_d: bool,
    /// Run batch norm with running statistics instead of batch statistics
    /// during adaptation.
    pub bn_eval_mode: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            k: 3,
            m: 2,
            u: 20,
            v: 5,
            r: 0.1,
            batch_size: 64,
            epochs: 10,
            lr_extractor: 1e-3,
            lr_head: 1e-2,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            mode: AdaptMode::NrcPlusPlus,
            bank: BankConfig::Full,
            disable_affinity: false,
            dedupe_expanded: false,
            disable_loss_n: false,
            disable_loss_e: false,
            disable_loss_self: false,
            disable_loss_div: false,
            disable_loss_d: false,
            bn_eval_mode: false,
        }
    }
}

impl AdaptConfig {
    /// Preset with wider neighbor lists (K = M = 5), suited to larger or
    /// noisier datasets.
    pub fn wide_neighborhood() -> Self {
        AdaptConfig {
            k: 5,
            m: 5,
            ..AdaptConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::Config("k and m must be at least 1".into()));
        }
        if self.density_enabled() && (self.v == 0 || self.u <= self.v) {
            return Err(Error::Config("nrc++ requires u > v >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.r) {
            return Err(Error::Config("r must lie in [-1, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_extractor < 0.0 || self.lr_head < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("rates must be non-negative".into()));
        }
        if let BankConfig::Fifo { capacity } = self.bank {
            if capacity < self.batch_size {
                return Err(Error::Config(
                    "fifo capacity must be at least the batch size".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: AdaptConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn density_enabled(&self) -> bool {
        self.mode == AdaptMode::NrcPlusPlus && !self.disable_loss_d
    }
}

/// Hyperparameters of source pretraining. JSON keys mirror the field names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub batch_norm: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_extractor: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            hidden_dims: vec![64],
            feature_dim: 32,
            batch_norm: true,
            epochs: 20,
            batch_size: 64,
            lr_extractor: 1e-2,
            lr_head: 1e-1,
            momentum: 0.9,
            weight_decay: 0.0,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.batch_norm && self.batch_size < 2 {
            return Err(Error::Config(
                "batch statistics need batch_size >= 2".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PretrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Momentum buffers, one per trainable scalar.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            velocity: vec![0.0; len],
        }
    }
}

/// Heavy-ball SGD: `v <- momentum * v + (g + weight_decay * theta)`,
/// `theta <- theta - lr * v`, with a learning rate per parameter group.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    groups: &[(Range<usize>, f64)],
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::invalid("parameter/gradient/state length mismatch"));
    }
    for (range, lr) in groups {
        if range.end > params.len() {
            return Err(Error::invalid("parameter group out of range"));
        }
        for i in range.clone() {
            let g = grads[i] + weight_decay * params[i];
            state.velocity[i] = momentum * state.velocity[i] + g;
            params[i] -= lr * state.velocity[i];
        }
    }
    Ok(())
}

fn param_groups(params: &ModelParams, lr_extractor: f64, lr_head: f64) -> Vec<(Range<usize>, f64)> {
    let split = params.head_offset();
    let total = params.trainable_len();
    vec![(0..split, lr_extractor), (split..total, lr_head)]
}

/// Seeded shuffled batches; the last incomplete batch is kept. When batch
/// statistics are in play a trailing singleton is merged into the previous
/// batch instead of being dropped.
fn batches(n: usize, batch_size: usize, min_last: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < min_last) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    chunks
}

/// Train a fresh model on labeled source data with label-smoothed
/// cross-entropy. Deterministic under a fixed seed.
pub fn pretrain_source(
    config: &PretrainConfig,
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
) -> Result<ModelParams> {
    config.validate()?;
    if features.rows() != labels.len() {
        return Err(Error::invalid("feature/label count mismatch"));
    }
    if features.rows() == 0 {
        return Err(Error::invalid("empty source set"));
    }
    for &l in labels {
        if l >= num_classes {
            return Err(Error::invalid(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
    }
    let mut seen = vec![false; num_classes];
    for &l in labels {
        seen[l] = true;
    }
    for (c, &present) in seen.iter().enumerate() {
        if !present {
            log::warn!("class {c} absent from the source set");
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let model_config = ModelConfig {
        input_dim: features.cols(),
        hidden_dims: config.hidden_dims.clone(),
        feature_dim: config.feature_dim,
        num_classes,
        ..ModelConfig::new(features.cols(), num_classes)
    };
    let mut params = ModelParams::init(
        ModelConfig {
            batch_norm: config.batch_norm,
            ..model_config
        },
        &mut rng,
    )?;
    let groups = param_groups(&params, config.lr_extractor, config.lr_head);
    let mut state = OptimizerState::new(params.trainable_len());

    let min_last = if config.batch_norm { 2 } else { 1 };
    for _epoch in 0..config.epochs {
        for batch in batches(features.rows(), config.batch_size, min_last, &mut rng) {
            let x = features.select_rows(&batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let cache = params.forward(&x, ForwardMode::Train)?;
            let (loss, dl_dp) =
                crate::model::source_pretrain_loss(cache.probs(), &y, config.label_smoothing)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("pretraining loss".into()));
            }
            let grads = params.backward(&cache, &dl_dp)?;
            let mut flat = params.flatten_trainable();
            sgd_step(
                &mut flat,
                &grads.flatten(),
                &mut state,
                &groups,
                config.momentum,
                config.weight_decay,
            )?;
            params.set_trainable(&flat)?;
        }
    }
    Ok(params)
}

/// One row of the per-iteration training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub l_n: f64,
    pub l_e: f64,
    pub l_self: f64,
    pub l_div: f64,
    pub l_d: f64,
    pub lambda_div: f64,
    pub total: f64,
}

/// Per-iteration loss breakdowns, writable as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "iter,l_n,l_e,l_self,l_div,l_d,lambda_div,total";

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iter, r.l_n, r.l_e, r.l_self, r.l_div, r.l_d, r.lambda_div, r.total
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }
}

/// All-`DIAG_K`-shared ratio recorded once at bank initialization (epoch 0)
/// and after every adaptation epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub all_shared: f64,
}

/// Result of one adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub params: ModelParams,
    pub log: TrainingLog,
    pub epoch_stats: Vec<EpochStat>,
}

/// Adapt a pretrained model to unlabeled target features.
pub fn adapt(config: &AdaptConfig, params: ModelParams, target: &Matrix) -> Result<AdaptOutcome> {
    config.validate()?;
    let n = target.rows();
    if n == 0 {
        return Err(Error::invalid("empty target set"));
    }
    if config.batch_size > n {
        return Err(Error::invalid(format!(
            "batch_size {} exceeds the {} target samples",
            config.batch_size, n
        )));
    }
    if target.cols() != params.input_dim() {
        return Err(Error::invalid("target dimension does not match the model"));
    }

    let mut params = params;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut banks = match config.bank {
        BankConfig::Full => MemoryBanks::initialize(&params, target)?,
        BankConfig::Fifo { capacity } => MemoryBanks::initialize_fifo(&params, target, capacity)?,
    };

    let loss_flags = LossFlags {
        neighborhood: !config.disable_loss_n,
        expanded: !config.disable_loss_e,
        self_regularization: !config.disable_loss_self,
        diversity: !config.disable_loss_div,
        density: config.density_enabled(),
    };
    let needs_graph = loss_flags.neighborhood || loss_flags.expanded || loss_flags.density;
    let graph_params = GraphParams {
        k: config.k,
        m: config.m,
        u: config.u,
        v: config.v,
        r: config.r,
        affinity_enabled: !config.disable_affinity,
        dedupe_expanded: config.dedupe_expanded,
        with_expanded: loss_flags.expanded,
        with_density: loss_flags.density,
    };

    let groups = param_groups(&params, config.lr_extractor, config.lr_head);
    let mut state = OptimizerState::new(params.trainable_len());
    let max_iter = config.epochs * n.div_ceil(config.batch_size);
    let forward_mode = if config.bn_eval_mode {
        ForwardMode::Eval
    } else {
        ForwardMode::Train
    };

    let mut log = TrainingLog::default();
    let mut epoch_stats = Vec::with_capacity(config.epochs + 1);
    let diag_k = DIAG_K.min(banks.len().saturating_sub(1));
    epoch_stats.push(EpochStat {
        epoch: 0,
        all_shared: all_k_shared_ratio(&banks, diag_k)?,
    });

    let uses_batch_stats = !config.bn_eval_mode && params.blocks.iter().any(|b| b.norm.is_some());
    if uses_batch_stats && config.batch_size < 2 {
        return Err(Error::invalid(
            "batch statistics need batch_size >= 2 (or set bn_eval_mode)",
        ));
    }
    let min_last = if uses_batch_stats { 2 } else { 1 };
    let mut iter = 0usize;
    for epoch in 0..config.epochs {
        for batch in batches(n, config.batch_size, min_last, &mut rng) {
            let x = target.select_rows(&batch)?;
            let cache = params.forward(&x, forward_mode)?;

            // Refresh the banks before the loss so the snapshot for the batch
            // equals the current predictions (stored as constants).
            let batch_rows = match banks.mode() {
                BankMode::Full => banks.update(&batch, cache.features(), cache.probs())?,
                BankMode::Fifo { .. } => {
                    banks.fifo_push(&batch, cache.features(), cache.probs())?
                }
            };

            let graph = if needs_graph {
                NeighborGraph::build(&banks, &batch_rows, &graph_params)?
            } else {
                NeighborGraph::empty(&batch_rows, config.r)
            };

            let lambda = lambda_schedule(iter, max_iter)?;
            let batch_scores = banks.scores().select_rows(&batch_rows)?;
            let breakdown = total_loss(
                cache.probs(),
                &graph,
                banks.scores(),
                &batch_scores,
                loss_flags,
                lambda,
            )?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite(format!("loss at iteration {iter}")));
            }

            let grads = params.backward(&cache, &breakdown.grad)?;
            let mut flat = params.flatten_trainable();
            sgd_step(
                &mut flat,
                &grads.flatten(),
                &mut state,
                &groups,
                config.momentum,
                config.weight_decay,
            )?;
            params.set_trainable(&flat)?;

            log.rows.push(LogRow {
                iter,
                l_n: breakdown.l_n,
                l_e: breakdown.l_e,
                l_self: breakdown.l_self,
                l_div: breakdown.l_div,
                l_d: breakdown.l_d,
                lambda_div: breakdown.lambda_div,
                total: breakdown.total,
            });
            iter += 1;
        }
        epoch_stats.push(EpochStat {
            epoch: epoch + 1,
            all_shared: all_k_shared_ratio(&banks, diag_k)?,
        });
    }

    Ok(AdaptOutcome {
        params,
        log,
        epoch_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_shift, ShiftSpec};
    use crate::diagnostics::accuracy;

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut params = vec![1.0, 2.0];
        let grads = vec![0.5, -1.0];
        let mut state = OptimizerState::new(2);
        sgd_step(&mut params, &grads, &mut state, &[(0..2, 0.1)], 0.0, 0.0).unwrap();
        assert!((params[0] - 0.95).abs() < 1e-15);
        assert!((params[1] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn sgd_velocity_decays_geometrically() {
        let mut params = vec![0.0];
        let mut state = OptimizerState::new(1);
        // One step with a gradient, then keep the gradient at zero.
        sgd_step(&mut params, &[1.0], &mut state, &[(0..1, 1.0)], 0.5, 0.0).unwrap();
        let mut prev_v = state.velocity[0];
        for _ in 0..10 {
            sgd_step(&mut params, &[0.0], &mut state, &[(0..1, 1.0)], 0.5, 0.0).unwrap();
            assert!((state.velocity[0] - 0.5 * prev_v).abs() < 1e-15);
            prev_v = state.velocity[0];
        }
        // Total displacement converges to -lr * g / (1 - momentum).
        assert!((params[0] - (-2.0)).abs() < 1e-2);
    }

    #[test]
    fn sgd_two_step_trace_matches_hand_recurrence() {
        // v1 = g1, theta1 = theta0 - lr v1; v2 = mu v1 + g2, theta2 = theta1 - lr v2.
        let (lr, mu) = (0.1, 0.9);
        let (g1, g2) = (2.0, -1.0);
        let mut params = vec![1.0];
        let mut state = OptimizerState::new(1);
        sgd_step(&mut params, &[g1], &mut state, &[(0..1, lr)], mu, 0.0).unwrap();
        let v1 = g1;
        let theta1 = 1.0 - lr * v1;
        assert!((params[0] - theta1).abs() < 1e-15);
        sgd_step(&mut params, &[g2], &mut state, &[(0..1, lr)], mu, 0.0).unwrap();
        let v2 = mu * v1 + g2;
        assert!((params[0] - (theta1 - lr * v2)).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut params = vec![0.0; 3];
        let mut state = OptimizerState::new(2);
        assert!(sgd_step(&mut params, &[0.0; 3], &mut state, &[(0..3, 0.1)], 0.9, 0.0).is_err());
    }

    fn two_blob_source(seed: u64) -> (Matrix, Vec<usize>) {
        let m = generate_synthetic_shift(
            2,
            2,
            100,
            &ShiftSpec {
                rotation_degrees: 0.0,
                translation: 0.0,
                noise_scale: 0.5,
            },
            seed,
        )
        .unwrap();
        (m.source_features, m.source_labels)
    }

    #[test]
    fn pretrain_reaches_high_accuracy_on_separable_data() {
        let (x, y) = two_blob_source(3);
        let cfg = PretrainConfig {
            epochs: 10,
            ..PretrainConfig::default()
        };
        let params = pretrain_source(&cfg, &x, &y, 2).unwrap();
        let cache = params.forward_eval(&x).unwrap();
        let acc = accuracy(cache.probs(), &y).unwrap();
        assert!(acc >= 0.99, "source accuracy {acc}");
    }

    #[test]
    fn pretrain_zero_epochs_returns_seeded_init() {
        let (x, y) = two_blob_source(4);
        let cfg = PretrainConfig {
            epochs: 0,
            seed: 11,
            ..PretrainConfig::default()
        };
        let params = pretrain_source(&cfg, &x, &y, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let fresh = ModelParams::init(
            ModelConfig {
                input_dim: 2,
                hidden_dims: cfg.hidden_dims.clone(),
                feature_dim: cfg.feature_dim,
                num_classes: 2,
                batch_norm: cfg.batch_norm,
                bn_momentum: 0.1,
                bn_eps: 1e-5,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(params.flatten_trainable(), fresh.flatten_trainable());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let (x, y) = two_blob_source(5);
        let cfg = PretrainConfig {
            epochs: 3,
            seed: 7,
            ..PretrainConfig::default()
        };
        let a = pretrain_source(&cfg, &x, &y, 2).unwrap();
        let b = pretrain_source(&cfg, &x, &y, 2).unwrap();
        assert_eq!(a.flatten_trainable(), b.flatten_trainable());
    }

    fn small_adapt_setup(seed: u64) -> (ModelParams, Matrix) {
        let m = generate_synthetic_shift(
            3,
            2,
            40,
            &ShiftSpec {
                rotation_degrees: 20.0,
                translation: 0.2,
                noise_scale: 0.8,
            },
            seed,
        )
        .unwrap();
        let cfg = PretrainConfig {
            epochs: 5,
            seed,
            ..PretrainConfig::default()
        };
        let params = pretrain_source(&cfg, &m.source_features, &m.source_labels, 3).unwrap();
        (params, m.target_features)
    }

    #[test]
    fn adapt_with_all_losses_disabled_keeps_parameters() {
        let (params, target) = small_adapt_setup(6);
        let before = params.flatten_trainable();
        let cfg = AdaptConfig {
            epochs: 2,
            batch_size: 16,
            u: 10,
            v: 3,
            disable_loss_n: true,
            disable_loss_e: true,
            disable_loss_self: true,
            disable_loss_div: true,
            disable_loss_d: true,
            ..AdaptConfig::default()
        };
        let outcome = adapt(&cfg, params, &target).unwrap();
        assert_eq!(outcome.params.flatten_trainable(), before);
    }

    #[test]
    fn adapt_log_total_recomposes_from_components() {
        let (params, target) = small_adapt_setup(7);
        let cfg = AdaptConfig {
            epochs: 1,
            batch_size: 16,
            u: 10,
            v: 3,
            ..AdaptConfig::default()
        };
        let outcome = adapt(&cfg, params, &target).unwrap();
        assert!(!outcome.log.rows.is_empty());
        for row in &outcome.log.rows {
            let recomposed = row.l_n + row.l_d + row.l_e + row.l_self + row.lambda_div * row.l_div;
            assert!((row.total - recomposed).abs() < 1e-12);
        }
    }

    #[test]
    fn adapt_is_deterministic_under_fixed_seed() {
        let (params, target) = small_adapt_setup(8);
        let cfg = AdaptConfig {
            epochs: 2,
            batch_size: 16,
            u: 10,
            v: 3,
            seed: 123,
            ..AdaptConfig::default()
        };
        let a = adapt(&cfg, params.clone(), &target).unwrap();
        let b = adapt(&cfg, params, &target).unwrap();
        assert_eq!(a.log.to_csv_string(), b.log.to_csv_string());
        assert_eq!(a.params.flatten_trainable(), b.params.flatten_trainable());
    }

    #[test]
    fn adapt_rejects_oversized_batch() {
        let (params, target) = small_adapt_setup(9);
        let cfg = AdaptConfig {
            batch_size: target.rows() + 1,
            ..AdaptConfig::default()
        };
        assert!(adapt(&cfg, params, &target).is_err());
    }

    #[test]
    fn no_shift_target_does_not_degrade() {
        // Target drawn from the source distribution: adaptation must not
        // hurt by more than 2 points.
        for seed in [21u64, 22, 23] {
            let m = generate_synthetic_shift(
                3,
                2,
                60,
                &ShiftSpec {
                    rotation_degrees: 0.0,
                    translation: 0.0,
                    noise_scale: 0.8,
                },
                seed,
            )
            .unwrap();
            let pre_cfg = PretrainConfig {
                epochs: 10,
                seed,
                ..PretrainConfig::default()
            };
            let params =
                pretrain_source(&pre_cfg, &m.source_features, &m.source_labels, 3).unwrap();
            let before = {
                let cache = params.forward_eval(&m.target_features).unwrap();
                accuracy(cache.probs(), &m.target_labels).unwrap()
            };
            let cfg = AdaptConfig {
                epochs: 5,
                batch_size: 32,
                u: 15,
                v: 5,
                seed,
                ..AdaptConfig::default()
            };
            let outcome = adapt(&cfg, params, &m.target_features).unwrap();
            let after = {
                let cache = outcome.params.forward_eval(&m.target_features).unwrap();
                accuracy(cache.probs(), &m.target_labels).unwrap()
            };
            assert!(
                after >= before - 0.02,
                "seed {seed}: accuracy dropped from {before} to {after}"
            );
        }
    }

    #[test]
    fn adapt_config_json_round_trip_and_validation() {
        let cfg = AdaptConfig::from_json(r#"{"k": 4, "mode": "nrc", "bank": "full"}"#).unwrap();
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.mode, AdaptMode::Nrc);

        let fifo =
            AdaptConfig::from_json(r#"{"bank": {"fifo": {"capacity": 128}}, "mode": "nrc++"}"#)
                .unwrap();
        assert_eq!(fifo.bank, BankConfig::Fifo { capacity: 128 });

        assert!(AdaptConfig::from_json(r#"{"unknown_key": 1}"#).is_err());
        assert!(AdaptConfig::from_json(r#"{"u": 2, "v": 5}"#).is_err());
        assert!(AdaptConfig::from_json(r#"{"momentum": 1.5}"#).is_err());
    }
}
