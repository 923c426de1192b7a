//! Source-free domain adaptation for feature vectors by neighborhood
//! reciprocity clustering.
//!
//! A classifier is pretrained on a labeled source domain and then adapted to
//! an unlabeled target domain without ever touching the source data again.
//! Adaptation exploits the cluster structure the target data keeps under
//! covariate shift: each sample is pushed to agree with the predictions of
//! its nearest neighbors, weighted by how trustworthy each neighbor is.
//!
//! The moving parts:
//!
//! - [`banks`]: memory banks snapshotting every target feature and prediction
//!   score, refreshed per batch and read by the losses as constants.
//! - [`graph`]: cosine kNN retrieval over the bank, reciprocal-neighbor
//!   affinities (reciprocal neighbors weigh 1, others `r`), expanded
//!   neighbor-of-neighbor multisets, and reverse-neighbor density sets that
//!   expose outliers.
//! - [`losses`]: neighborhood, expanded-neighbor, self-regularization,
//!   diversity, and density terms, each returning its gradient with respect
//!   to the batch predictions.
//! - [`model`]: a small MLP (linear / batch norm / ReLU blocks and a
//!   weight-normalized classifier) with hand-written, finite-difference-
//!   checked backpropagation.
//! - [`trainer`]: SGD with momentum and parameter groups, source
//!   pretraining, and the adaptation loop.
//! - [`data`]: a synthetic covariate-shift benchmark plus binary/CSV feature
//!   formats ("NRCF") and an embeddings dump.
//! - [`diagnostics`]: accuracy metrics and neighbor-purity curves.
//!
//! Two method variants exist: the base variant composes the neighborhood,
//! expanded, self, and diversity terms; the density-augmented variant
//! ("nrc++") adds the density term that mutes outliers.
//!
//! See the `examples/` directory for runnable end-to-end pipelines, and the
//! `nrc-cli` crate for batch use.

// Index loops in the numeric kernels and test oracles intentionally mirror
// the summation indices.
#![allow(clippy::needless_range_loop)]

pub mod banks;
pub mod data;
pub mod diagnostics;
mod error;
pub mod graph;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
