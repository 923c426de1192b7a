//! The trainable network, split into a feature extractor and a classifier.
//!
//! The extractor is a stack of blocks (linear -> optional batch norm ->
//! optional ReLU); the final block is the bottleneck that produces features
//! `z`. The classifier is a weight-normalized linear layer producing logits,
//! and predictions are `p = softmax(logits)`.
//!
//! Backpropagation is analytic and hand-written; every gradient is checked
//! against central finite differences in the test suite.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, softmax_rows, Matrix, LOG_FLOOR};

/// Magic bytes of the parameter checkpoint format.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NRCM";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Forward-pass mode. Train mode normalizes with batch statistics and updates
/// running statistics; eval mode uses running statistics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// Shape and normalization choices for the network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the hidden blocks (linear + batch norm + ReLU each).
    pub hidden_dims: Vec<usize>,
    /// Bottleneck width; the bottleneck block has batch norm but no ReLU.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims: vec![64],
            feature_dim: 32,
            num_classes,
            batch_norm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::invalid("bad batch-norm settings"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    /// `in_dim x out_dim`; forward computes `x W + b`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

/// One extractor stage: linear, then optional batch norm, then optional ReLU.
#[derive(Debug, Clone)]
pub struct ExtractorBlock {
    pub linear: LinearLayer,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

/// Weight-normalized classifier: effective row i is
/// `magnitude[i] * direction[i] / ||direction[i]||`. No bias.
#[derive(Debug, Clone)]
pub struct WeightNormClassifier {
    /// `num_classes x feature_dim`.
    pub direction: Matrix,
    pub magnitude: Vec<f64>,
}

impl WeightNormClassifier {
    /// Effective weight matrix (`num_classes x feature_dim`); rows are the
    /// unit directions scaled by their magnitudes.
    pub fn effective(&self) -> Matrix {
        let mut w = self.direction.clone();
        for (i, &g) in self.magnitude.iter().enumerate() {
            let scale = g / l2_norm(self.direction.row(i)).max(1e-12);
            for v in w.row_mut(i) {
                *v *= scale;
            }
        }
        w
    }

    /// Rescale direction rows to unit norm. The effective weights are
    /// unchanged, so applying twice is a no-op.
    pub fn apply_weight_norm(&mut self) {
        for i in 0..self.direction.rows() {
            let norm = l2_norm(self.direction.row(i)).max(1e-12);
            for v in self.direction.row_mut(i) {
                *v /= norm;
            }
        }
    }
}

/// All parameters of the network plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub blocks: Vec<ExtractorBlock>,
    pub classifier: WeightNormClassifier,
}

struct NormCache {
    inv_std: Vec<f64>,
    x_hat: Matrix,
}

struct BlockCache {
    /// Output after batch norm, before ReLU.
    post_norm: Matrix,
    /// Block output (after ReLU when present).
    output: Matrix,
    norm: Option<NormCache>,
}

/// Everything backward needs from one forward pass.
pub struct ForwardCache {
    mode: ForwardMode,
    input: Matrix,
    blocks: Vec<BlockCache>,
    logits: Matrix,
    probs: Matrix,
}

impl ForwardCache {
    /// Bottleneck features `z`.
    pub fn features(&self) -> &Matrix {
        &self.blocks.last().expect("at least one block").output
    }

    /// Class probabilities `p`.
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    fn block_input(&self, idx: usize) -> &Matrix {
        if idx == 0 {
            &self.input
        } else {
            &self.blocks[idx - 1].output
        }
    }
}

/// Gradients for every trainable parameter, shaped like [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub blocks: Vec<BlockGrads>,
    pub classifier_direction: Matrix,
    pub classifier_magnitude: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

impl ModelParams {
    /// Seeded initialization: Xavier-uniform linear weights, zero biases,
    /// identity batch norm, unit-magnitude classifier with unit-norm rows.
    pub fn init(config: ModelConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        let mut in_dim = config.input_dim;
        let mut dims: Vec<(usize, bool)> = config.hidden_dims.iter().map(|&d| (d, true)).collect();
        dims.push((config.feature_dim, false));
        for (out_dim, relu) in dims {
            if out_dim == 0 {
                return Err(Error::invalid("zero-width layer"));
            }
            let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let mut weight = Matrix::zeros(in_dim, out_dim);
            for v in weight.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            blocks.push(ExtractorBlock {
                linear: LinearLayer {
                    weight,
                    bias: vec![0.0; out_dim],
                },
                norm: config.batch_norm.then(|| BatchNorm::new(out_dim)),
                relu,
            });
            in_dim = out_dim;
        }
        let bound = (6.0 / (config.feature_dim + config.num_classes) as f64).sqrt();
        let mut direction = Matrix::zeros(config.num_classes, config.feature_dim);
        for v in direction.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        let mut classifier = WeightNormClassifier {
            direction,
            magnitude: vec![1.0; config.num_classes],
        };
        classifier.apply_weight_norm();
        Ok(ModelParams {
            config,
            blocks,
            classifier,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Forward pass. Train mode requires batch size >= 2 when batch norm is
    /// enabled and updates the running statistics in place.
    pub fn forward(&mut self, x: &Matrix, mode: ForwardMode) -> Result<ForwardCache> {
        let (cache, updates) = self.forward_inner(x, mode)?;
        for (idx, mean, var) in updates {
            let bn = self.blocks[idx].norm.as_mut().expect("bn present");
            let m = self.config.bn_momentum;
            for j in 0..bn.running_mean.len() {
                bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * mean[j];
                bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * var[j];
            }
        }
        Ok(cache)
    }

    /// Eval-mode forward without mutation; safe for concurrent readers.
    pub fn forward_eval(&self, x: &Matrix) -> Result<ForwardCache> {
        let (cache, _) = self.forward_inner(x, ForwardMode::Eval)?;
        Ok(cache)
    }

    #[allow(clippy::type_complexity)]
    fn forward_inner(
        &self,
        x: &Matrix,
        mode: ForwardMode,
    ) -> Result<(ForwardCache, Vec<(usize, Vec<f64>, Vec<f64>)>)> {
        if x.cols() != self.config.input_dim {
            return Err(Error::invalid(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.config.input_dim
            )));
        }
        if x.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        x.ensure_finite("forward input")?;
        if mode == ForwardMode::Train && self.config.batch_norm && x.rows() < 2 {
            return Err(Error::invalid(
                "train-mode forward with batch norm needs batch size >= 2",
            ));
        }

        let n = x.rows();
        let mut stat_updates = Vec::new();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut current = x.clone();
        for (idx, block) in self.blocks.iter().enumerate() {
            let mut a = current.matmul(&block.linear.weight)?;
            for row in 0..n {
                for (v, b) in a.row_mut(row).iter_mut().zip(&block.linear.bias) {
                    *v += b;
                }
            }
            let (post_norm, norm_cache) = match &block.norm {
                None => (a, None),
                Some(bn) => {
                    let d = bn.gamma.len();
                    let (mean, var) = match mode {
                        ForwardMode::Train => {
                            let mut mean = vec![0.0; d];
                            for row in a.iter_rows() {
                                for (m, &v) in mean.iter_mut().zip(row) {
                                    *m += v;
                                }
                            }
                            for m in &mut mean {
                                *m /= n as f64;
                            }
                            let mut var = vec![0.0; d];
                            for row in a.iter_rows() {
                                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                                    *s += (v - m) * (v - m);
                                }
                            }
                            for s in &mut var {
                                *s /= n as f64;
                            }
                            // Running variance tracks the unbiased estimate.
                            let unbiased: Vec<f64> = if n > 1 {
                                var.iter().map(|&v| v * n as f64 / (n - 1) as f64).collect()
                            } else {
                                var.clone()
                            };
                            stat_updates.push((idx, mean.clone(), unbiased));
                            (mean, var)
                        }
                        ForwardMode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                    };
                    let inv_std: Vec<f64> = var
                        .iter()
                        .map(|&v| 1.0 / (v + self.config.bn_eps).sqrt())
                        .collect();
                    let mut x_hat = a.clone();
                    for row in 0..n {
                        for ((v, &m), &is) in x_hat.row_mut(row).iter_mut().zip(&mean).zip(&inv_std)
                        {
                            *v = (*v - m) * is;
                        }
                    }
                    let mut out = x_hat.clone();
                    for row in 0..n {
                        for ((v, &g), &b) in
                            out.row_mut(row).iter_mut().zip(&bn.gamma).zip(&bn.beta)
                        {
                            *v = *v * g + b;
                        }
                    }
                    (out, Some(NormCache { inv_std, x_hat }))
                }
            };
            let output = if block.relu {
                let mut out = post_norm.clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                out
            } else {
                post_norm.clone()
            };
            current = output.clone();
            block_caches.push(BlockCache {
                post_norm,
                output,
                norm: norm_cache,
            });
        }

        let w_eff = self.classifier.effective();
        let logits = current.matmul_nt(&w_eff)?;
        let probs = softmax_rows(&logits)?;
        Ok((
            ForwardCache {
                mode,
                input: x.clone(),
                blocks: block_caches,
                logits,
                probs,
            },
            stat_updates,
        ))
    }

    /// Backpropagate a gradient with respect to the probabilities `p` through
    /// softmax, the classifier, and every extractor block.
    pub fn backward(&self, cache: &ForwardCache, dl_dp: &Matrix) -> Result<ModelGrads> {
        let p = &cache.probs;
        if dl_dp.rows() != p.rows() || dl_dp.cols() != p.cols() {
            return Err(Error::invalid(format!(
                "gradient shape {}x{} does not match probabilities {}x{}",
                dl_dp.rows(),
                dl_dp.cols(),
                p.rows(),
                p.cols()
            )));
        }
        let n = p.rows();

        // Softmax Jacobian: dL/dlogit_j = p_j (dL/dp_j - sum_k dL/dp_k p_k).
        let mut d_logits = Matrix::zeros(n, p.cols());
        for i in 0..n {
            let pr = p.row(i);
            let gr = dl_dp.row(i);
            let inner = dot(pr, gr);
            for (j, v) in d_logits.row_mut(i).iter_mut().enumerate() {
                *v = pr[j] * (gr[j] - inner);
            }
        }

        // Classifier: logits = z W_eff^T with W_eff rows g_i * v_i / ||v_i||.
        let z = cache.features();
        let w_eff = self.classifier.effective();
        let d_z = d_logits.matmul(&w_eff)?;
        let d_w_eff = d_logits.matmul_tn(z)?;
        let c = self.config.num_classes;
        let mut d_direction = Matrix::zeros(c, self.config.feature_dim);
        let mut d_magnitude = vec![0.0; c];
        for i in 0..c {
            let v = self.classifier.direction.row(i);
            let norm = l2_norm(v).max(1e-12);
            let dw = d_w_eff.row(i);
            let vhat: Vec<f64> = v.iter().map(|&x| x / norm).collect();
            let proj = dot(&vhat, dw);
            d_magnitude[i] = proj;
            let scale = self.classifier.magnitude[i] / norm;
            for (j, out) in d_direction.row_mut(i).iter_mut().enumerate() {
                *out = scale * (dw[j] - vhat[j] * proj);
            }
        }

        // Extractor blocks, in reverse.
        let mut block_grads: Vec<BlockGrads> = Vec::with_capacity(self.blocks.len());
        let mut d_out = d_z;
        for idx in (0..self.blocks.len()).rev() {
            let block = &self.blocks[idx];
            let bc = &cache.blocks[idx];

            if block.relu {
                for (g, &h) in d_out.data_mut().iter_mut().zip(bc.post_norm.data()) {
                    if h <= 0.0 {
                        *g = 0.0;
                    }
                }
            }

            let (d_a, gamma_grad, beta_grad) = match (&block.norm, &bc.norm) {
                (None, None) => (d_out, None, None),
                (Some(bn), Some(nc)) => {
                    let d = bn.gamma.len();
                    let mut d_gamma = vec![0.0; d];
                    let mut d_beta = vec![0.0; d];
                    for i in 0..n {
                        let gr = d_out.row(i);
                        let xh = nc.x_hat.row(i);
                        for j in 0..d {
                            d_gamma[j] += gr[j] * xh[j];
                            d_beta[j] += gr[j];
                        }
                    }
                    let mut d_a = Matrix::zeros(n, d);
                    match cache.mode {
                        ForwardMode::Eval => {
                            // Running statistics are constants.
                            for i in 0..n {
                                let gr = d_out.row(i);
                                for (j, v) in d_a.row_mut(i).iter_mut().enumerate() {
                                    *v = gr[j] * bn.gamma[j] * nc.inv_std[j];
                                }
                            }
                        }
                        ForwardMode::Train => {
                            // Batch statistics depend on the activations.
                            let mut sum_dxh = vec![0.0; d];
                            let mut sum_dxh_xh = vec![0.0; d];
                            for i in 0..n {
                                let gr = d_out.row(i);
                                let xh = nc.x_hat.row(i);
                                for j in 0..d {
                                    let dxh = gr[j] * bn.gamma[j];
                                    sum_dxh[j] += dxh;
                                    sum_dxh_xh[j] += dxh * xh[j];
                                }
                            }
                            let nf = n as f64;
                            for i in 0..n {
                                let gr = d_out.row(i);
                                let xh = nc.x_hat.row(i);
                                for (j, v) in d_a.row_mut(i).iter_mut().enumerate() {
                                    let dxh = gr[j] * bn.gamma[j];
                                    *v = nc.inv_std[j]
                                        * (dxh - sum_dxh[j] / nf - xh[j] * sum_dxh_xh[j] / nf);
                                }
                            }
                        }
                    }
                    (d_a, Some(d_gamma), Some(d_beta))
                }
                _ => unreachable!("cache and params disagree on batch norm"),
            };

            let block_input = cache.block_input(idx);
            let d_weight = block_input.matmul_tn(&d_a)?;
            let mut d_bias = vec![0.0; block.linear.bias.len()];
            for row in d_a.iter_rows() {
                for (b, &v) in d_bias.iter_mut().zip(row) {
                    *b += v;
                }
            }
            d_out = d_a.matmul_nt(&block.linear.weight)?;
            block_grads.push(BlockGrads {
                weight: d_weight,
                bias: d_bias,
                gamma: gamma_grad,
                beta: beta_grad,
            });
        }
        block_grads.reverse();
        Ok(ModelGrads {
            blocks: block_grads,
            classifier_direction: d_direction,
            classifier_magnitude: d_magnitude,
        })
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_len(&self) -> usize {
        let mut n = 0;
        for b in &self.blocks {
            n += b.linear.weight.data().len() + b.linear.bias.len();
            if let Some(bn) = &b.norm {
                n += bn.gamma.len() + bn.beta.len();
            }
        }
        n + self.classifier.direction.data().len() + self.classifier.magnitude.len()
    }

    /// Flat index at which the head parameter group starts. The head is the
    /// bottleneck block plus the classifier; everything before it belongs to
    /// the extractor group.
    pub fn head_offset(&self) -> usize {
        let mut n = 0;
        for b in &self.blocks[..self.blocks.len() - 1] {
            n += b.linear.weight.data().len() + b.linear.bias.len();
            if let Some(bn) = &b.norm {
                n += bn.gamma.len() + bn.beta.len();
            }
        }
        n
    }

    /// Trainable parameters in declaration order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for b in &self.blocks {
            out.extend_from_slice(b.linear.weight.data());
            out.extend_from_slice(&b.linear.bias);
            if let Some(bn) = &b.norm {
                out.extend_from_slice(&bn.gamma);
                out.extend_from_slice(&bn.beta);
            }
        }
        out.extend_from_slice(self.classifier.direction.data());
        out.extend_from_slice(&self.classifier.magnitude);
        out
    }

    /// Overwrite trainable parameters from a flat buffer in declaration order.
    pub fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_len() {
            return Err(Error::invalid(format!(
                "flat parameter buffer has {} entries, expected {}",
                flat.len(),
                self.trainable_len()
            )));
        }
        let mut pos = 0;
        let take = |dst: &mut [f64], pos: &mut usize| {
            dst.copy_from_slice(&flat[*pos..*pos + dst.len()]);
            *pos += dst.len();
        };
        for b in &mut self.blocks {
            take(b.linear.weight.data_mut(), &mut pos);
            take(&mut b.linear.bias, &mut pos);
            if let Some(bn) = &mut b.norm {
                take(&mut bn.gamma, &mut pos);
                take(&mut bn.beta, &mut pos);
            }
        }
        take(self.classifier.direction.data_mut(), &mut pos);
        take(&mut self.classifier.magnitude, &mut pos);
        Ok(())
    }
}

impl ModelGrads {
    /// Gradients flattened in the same order as
    /// [`ModelParams::flatten_trainable`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(b.weight.data());
            out.extend_from_slice(&b.bias);
            if let Some(g) = &b.gamma {
                out.extend_from_slice(g);
            }
            if let Some(g) = &b.beta {
                out.extend_from_slice(g);
            }
        }
        out.extend_from_slice(self.classifier_direction.data());
        out.extend_from_slice(&self.classifier_magnitude);
        out
    }
}

/// Label-smoothed cross-entropy for source pretraining.
///
/// Targets put `1 - smoothing` on the true class and `smoothing / (C - 1)`
/// elsewhere. Returns the batch-mean loss and its gradient with respect to
/// the probabilities (to be chained through softmax by
/// [`ModelParams::backward`]).
pub fn source_pretrain_loss(p: &Matrix, labels: &[usize], smoothing: f64) -> Result<(f64, Matrix)> {
    if labels.len() != p.rows() {
        return Err(Error::invalid("labels/batch size mismatch"));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid("smoothing must be in [0, 1)"));
    }
    let c = p.cols();
    let n = p.rows();
    let off = if c > 1 {
        smoothing / (c - 1) as f64
    } else {
        0.0
    };
    let on = 1.0 - smoothing;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for i in 0..n {
        if labels[i] >= c {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                labels[i], c
            )));
        }
        let pr = p.row(i);
        let gr = grad.row_mut(i);
        for j in 0..c {
            let target = if j == labels[i] { on } else { off };
            if target == 0.0 {
                continue;
            }
            loss -= target * pr[j].max(LOG_FLOOR).ln();
            if pr[j] > LOG_FLOOR {
                gr[j] = -target / pr[j] / n as f64;
            }
        }
    }
    Ok((loss / n as f64, grad))
}

// ---------------------------------------------------------------------------
// Checkpoint IO ("NRCM"): magic, u32 version, dims, then raw little-endian
// f64 parameter blocks in declaration order (running statistics included).
// ---------------------------------------------------------------------------

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::format(
                self.offset,
                format!("truncated file while reading {what}"),
            )),
            Err(e) => Err(e.into()),
        }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    fn read_f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn read_f64_into(&mut self, dst: &mut [f64], what: &str) -> Result<()> {
        let mut buf = vec![0u8; dst.len() * 8];
        self.read_exact(&mut buf, what)?;
        for (v, chunk) in dst.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}

impl ModelParams {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.config.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.config.feature_dim as u32).to_le_bytes())?;
        w.write_all(&(self.config.num_classes as u32).to_le_bytes())?;
        w.write_all(&(self.config.hidden_dims.len() as u32).to_le_bytes())?;
        for &d in &self.config.hidden_dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[self.config.batch_norm as u8])?;
        w.write_all(&self.config.bn_momentum.to_le_bytes())?;
        w.write_all(&self.config.bn_eps.to_le_bytes())?;
        let write_f64s = |w: &mut dyn Write, xs: &[f64]| -> Result<()> {
            for v in xs {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for b in &self.blocks {
            write_f64s(&mut w, b.linear.weight.data())?;
            write_f64s(&mut w, &b.linear.bias)?;
            if let Some(bn) = &b.norm {
                write_f64s(&mut w, &bn.gamma)?;
                write_f64s(&mut w, &bn.beta)?;
                write_f64s(&mut w, &bn.running_mean)?;
                write_f64s(&mut w, &bn.running_var)?;
            }
        }
        write_f64s(&mut w, self.classifier.direction.data())?;
        write_f64s(&mut w, &self.classifier.magnitude)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = CountingReader::new(std::io::BufReader::new(std::fs::File::open(path)?));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected NRCM"));
        }
        let version = r.read_u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let input_dim = r.read_u32("input_dim")? as usize;
        let feature_dim = r.read_u32("feature_dim")? as usize;
        let num_classes = r.read_u32("num_classes")? as usize;
        let n_hidden = r.read_u32("hidden layer count")? as usize;
        if n_hidden > 1024 {
            return Err(Error::format(
                r.offset - 4,
                "implausible hidden layer count",
            ));
        }
        let mut hidden_dims = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            let d = r.read_u32("hidden dim")? as usize;
            if d == 0 || d > 1 << 20 {
                return Err(Error::format(r.offset - 4, "hidden dim out of range"));
            }
            hidden_dims.push(d);
        }
        let batch_norm = r.read_u8("batch_norm flag")? != 0;
        let bn_momentum = r.read_f64("bn_momentum")?;
        let bn_eps = r.read_f64("bn_eps")?;
        let config = ModelConfig {
            input_dim,
            hidden_dims,
            feature_dim,
            num_classes,
            batch_norm,
            bn_momentum,
            bn_eps,
        };
        config
            .validate()
            .map_err(|e| Error::format(r.offset, format!("bad header: {e}")))?;

        let mut blocks = Vec::new();
        let mut in_dim = config.input_dim;
        let mut dims: Vec<(usize, bool)> = config.hidden_dims.iter().map(|&d| (d, true)).collect();
        dims.push((config.feature_dim, false));
        for (out_dim, relu) in dims {
            let mut weight = Matrix::zeros(in_dim, out_dim);
            r.read_f64_into(weight.data_mut(), "layer weight")?;
            let mut bias = vec![0.0; out_dim];
            r.read_f64_into(&mut bias, "layer bias")?;
            let norm = if batch_norm {
                let mut bn = BatchNorm::new(out_dim);
                r.read_f64_into(&mut bn.gamma, "bn gamma")?;
                r.read_f64_into(&mut bn.beta, "bn beta")?;
                r.read_f64_into(&mut bn.running_mean, "bn running mean")?;
                r.read_f64_into(&mut bn.running_var, "bn running var")?;
                Some(bn)
            } else {
                None
            };
            blocks.push(ExtractorBlock {
                linear: LinearLayer { weight, bias },
                norm,
                relu,
            });
            in_dim = out_dim;
        }
        let mut direction = Matrix::zeros(num_classes, feature_dim);
        r.read_f64_into(direction.data_mut(), "classifier direction")?;
        let mut magnitude = vec![0.0; num_classes];
        r.read_f64_into(&mut magnitude, "classifier magnitude")?;
        Ok(ModelParams {
            config,
            blocks,
            classifier: WeightNormClassifier {
                direction,
                magnitude,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_params(seed: u64, batch_norm: bool) -> ModelParams {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let config = ModelConfig {
            input_dim: 3,
            hidden_dims: vec![5],
            feature_dim: 4,
            num_classes: 3,
            batch_norm,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        };
        ModelParams::init(config, &mut rng).unwrap()
    }

    fn random_batch(seed: u64, rows: usize, cols: usize) -> Matrix {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_predictions() {
        let mut params = small_params(0, false);
        let zeros = vec![0.0; params.trainable_len()];
        params.set_trainable(&zeros).unwrap();
        let x = random_batch(1, 4, 3);
        let cache = params.forward_eval(&x).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                assert!((cache.probs().get(r, c) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let config = ModelConfig {
            input_dim: 3,
            hidden_dims: vec![],
            feature_dim: 2,
            num_classes: 2,
            batch_norm: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        };
        let params = ModelParams::init(config, &mut rng).unwrap();
        let x = random_batch(4, 5, 3);
        let cache = params.forward_eval(&x).unwrap();
        let w = &params.blocks[0].linear.weight;
        let b = &params.blocks[0].linear.bias;
        for i in 0..5 {
            for j in 0..2 {
                let expected: f64 = (0..3).map(|k| x.get(i, k) * w.get(k, j)).sum::<f64>() + b[j];
                assert!((cache.features().get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut params = small_params(5, true);
        let x = random_batch(6, 8, 3);
        let cache = params.forward(&x, ForwardMode::Train).unwrap();
        for r in 0..8 {
            let s: f64 = cache.probs().row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut params = small_params(7, true);
        let x = random_batch(8, 4, 3);
        let cache = params.forward(&x, ForwardMode::Train).unwrap();
        let zero = Matrix::zeros(4, 3);
        let grads = params.backward(&cache, &zero).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut params = small_params(9, true);
        let x = random_batch(10, 4, 2);
        assert!(params.forward(&x, ForwardMode::Eval).is_err());
        let x1 = random_batch(11, 1, 3);
        assert!(params.forward(&x1, ForwardMode::Train).is_err());
    }

    /// Classic check: for a bias-free linear layer + softmax + cross-entropy,
    /// the logit gradient is (p - y)/n, so dW = x^T (p - y)/n.
    #[test]
    fn linear_softmax_cross_entropy_gradient_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let config = ModelConfig {
            input_dim: 3,
            hidden_dims: vec![],
            feature_dim: 3,
            num_classes: 3,
            batch_norm: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        };
        let mut params = ModelParams::init(config, &mut rng).unwrap();
        // Identity feature map so z = x.
        let n_trainable = params.trainable_len();
        let mut flat = vec![0.0; n_trainable];
        for i in 0..3 {
            flat[i * 3 + i] = 1.0; // weight = I
        }
        // classifier: direction = I, magnitude = 1 => logits = z
        let dir_start = 3 * 3 + 3;
        for i in 0..3 {
            flat[dir_start + i * 3 + i] = 1.0;
        }
        for i in 0..3 {
            flat[dir_start + 9 + i] = 1.0;
        }
        params.set_trainable(&flat).unwrap();

        let x = random_batch(13, 6, 3);
        let labels = vec![0usize, 1, 2, 0, 1, 2];
        let cache = params.forward_eval(&x).unwrap();
        let (_, dl_dp) = source_pretrain_loss(cache.probs(), &labels, 0.0).unwrap();
        let grads = params.backward(&cache, &dl_dp).unwrap();

        // Expected classifier-magnitude/direction gradient via (p - y) form:
        // d_logits = (p - y)/n, dW_eff = d_logits^T z.
        let n = 6.0;
        let mut d_logits = Matrix::zeros(6, 3);
        for i in 0..6 {
            for j in 0..3 {
                let y = if labels[i] == j { 1.0 } else { 0.0 };
                d_logits.set(i, j, (cache.probs().get(i, j) - y) / n);
            }
        }
        let d_w_eff = d_logits.matmul_tn(&x).unwrap();
        // direction rows are unit vectors e_i with magnitude 1, so the
        // direction gradient is the off-axis part and magnitude gradient the
        // axial part of dW_eff.
        for i in 0..3 {
            assert!((grads.classifier_magnitude[i] - d_w_eff.get(i, i)).abs() < 1e-12);
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { d_w_eff.get(i, j) };
                assert!((grads.classifier_direction.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pretrain_loss_values() {
        // One-hot correct prediction, no smoothing: loss ~ 0.
        let p = Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let (loss, _) = source_pretrain_loss(&p, &[0], 0.0).unwrap();
        assert!(loss.abs() < 1e-12);

        // Uniform prediction over 4 classes: loss = ln 4.
        let p = Matrix::from_vec(2, 4, vec![0.25; 8]).unwrap();
        let (loss, _) = source_pretrain_loss(&p, &[1, 3], 0.0).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_matches_direct_formula() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let logits = random_batch(19, 5, 3);
        let p = softmax_rows(&logits).unwrap();
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        let s = 0.1;
        let (loss, _) = source_pretrain_loss(&p, &labels, s).unwrap();
        let mut expected = 0.0;
        for i in 0..5 {
            for j in 0..3 {
                let t = if labels[i] == j { 1.0 - s } else { s / 2.0 };
                expected -= t * p.get(i, j).ln();
            }
        }
        expected /= 5.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_rejects_bad_labels() {
        let p = Matrix::from_vec(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        assert!(source_pretrain_loss(&p, &[3], 0.0).is_err());
    }

    #[test]
    fn weight_norm_apply_is_idempotent() {
        let mut params = small_params(23, true);
        let once = {
            let mut c = params.classifier.clone();
            c.apply_weight_norm();
            c
        };
        params.classifier.apply_weight_norm();
        params.classifier.apply_weight_norm();
        let eff_once = once.effective();
        let eff_twice = params.classifier.effective();
        for (a, b) in eff_once.data().iter().zip(eff_twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in 0..params.classifier.direction.rows() {
            assert!((l2_norm(params.classifier.direction.row(i)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_immutable() {
        let params = small_params(29, true);
        let x = random_batch(31, 4, 3);
        let a = params.forward_eval(&x).unwrap();
        let b = params.forward_eval(&x).unwrap();
        assert_eq!(a.probs(), b.probs());
        assert_eq!(a.features(), b.features());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nrcm");
        let mut params = small_params(37, true);
        // Touch running stats so they are non-trivial.
        let x = random_batch(41, 8, 3);
        params.forward(&x, ForwardMode::Train).unwrap();
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(params.config, loaded.config);
        assert_eq!(params.flatten_trainable(), loaded.flatten_trainable());
        for (a, b) in params.blocks.iter().zip(&loaded.blocks) {
            let (abn, bbn) = (a.norm.as_ref().unwrap(), b.norm.as_ref().unwrap());
            assert_eq!(abn.running_mean, bbn.running_mean);
            assert_eq!(abn.running_var, bbn.running_var);
        }
    }

    #[test]
    fn checkpoint_bad_magic_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nrcm");
        std::fs::write(&path, b"JUNKxxxxxxxxxxxxxxxx").unwrap();
        match ModelParams::load(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::numerics::finite_difference_gradient;
        for (seed, batch_norm, mode) in [
            (43u64, true, ForwardMode::Train),
            (47, true, ForwardMode::Eval),
            (53, false, ForwardMode::Train),
        ] {
            let params = small_params(seed, batch_norm);
            let x = random_batch(seed + 1, 6, 3);
            let labels = vec![0usize, 1, 2, 0, 1, 2];
            let theta = params.flatten_trainable();

            let loss_at = |t: &[f64]| {
                let mut p = params.clone();
                p.set_trainable(t).unwrap();
                let (cache, _) = p.forward_inner(&x, mode).unwrap();
                source_pretrain_loss(cache.probs(), &labels, 0.1).unwrap().0
            };
            let fd = finite_difference_gradient(loss_at, &theta, 1e-5);

            let mut p = params.clone();
            let cache = p.forward(&x, mode).unwrap();
            let (_, dl_dp) = source_pretrain_loss(cache.probs(), &labels, 0.1).unwrap();
            let analytic = p.backward(&cache, &dl_dp).unwrap().flatten();

            for (k, (&a, &f)) in analytic.iter().zip(&fd).enumerate() {
                let rel = (a - f).abs() / (a.abs() + f.abs() + 1e-6);
                assert!(
                    rel < 1e-4,
                    "seed {seed} bn {batch_norm} param {k}: analytic {a} vs fd {f} (rel {rel})"
                );
            }
        }
    }
}
