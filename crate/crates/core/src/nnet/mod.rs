//! Compact EEGNet-style classifier, written from first principles.
//!
//! Layer stack (time axis last):
//!
//! ```text
//! temporal conv (F1 kernels, same padding) -> BN
//!   -> depthwise spatial conv (D per kernel, collapses channels) -> BN -> ELU
//!   -> avgpool(pool1) -> dropout
//!   -> separable conv (depthwise time conv + 1x1 pointwise) -> BN -> ELU
//!   -> avgpool(pool2) -> dropout -> flatten -> dense -> logits
//! ```
//!
//! The first two convolutions are linear with only a per-kernel affine BN
//! between them, so the forward pass mixes channels first and convolves the
//! F1*D mixtures in the frequency domain; BN batch statistics of the temporal
//! conv output come from precomputed per-epoch window sums and lagged Gram
//! matrices. The result equals the layer-by-layer computation and costs a
//! fraction of it.

mod adam;
mod model;
mod spectral;
mod train;
mod weights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamState};
pub use model::{backward, forward, forward_prepared, prepare, softmax_rows, weighted_cross_entropy, Cache, Mode, PreparedEpoch};
pub use train::{predict_proba, predict_proba_prepared, train, History, TrainOutcome};
pub use weights::{decode_records, encode_records, ModelWeights, Params, Running};

/// BatchNorm epsilon and running-statistics momentum.
pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.1;

/// Class indices of the two logits.
pub const NONTARGET: usize = 0;
pub const TARGET: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("shape mismatch at {layer}: {detail}")]
    Shape { layer: &'static str, detail: String },
    #[error("backward needs a cache from a train-mode forward pass")]
    MissingCache,
    #[error("non-finite gradient in {tensor} at step {step}; training aborted")]
    NonFiniteGradient { tensor: &'static str, step: u64 },
    #[error("training set must contain both classes")]
    SingleClass,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("max-norm constraint violated on {tensor}: norm {norm} > {bound}")]
    MaxNorm { tensor: &'static str, norm: f64, bound: f64 },
    #[error("weights file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    #[serde(rename = "F1")]
    pub f1: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "F2")]
    pub f2: usize,
    pub temporal_kernel: usize,
    pub separable_kernel: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout1: f64,
    pub dropout2: f64,
    pub depthwise_maxnorm: f64,
    pub dense_maxnorm: f64,
    pub n_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            f1: 8,
            d: 2,
            f2: 16,
            temporal_kernel: 100,
            separable_kernel: 16,
            pool1: 4,
            pool2: 8,
            dropout1: 0.25,
            dropout2: 0.25,
            depthwise_maxnorm: 1.0,
            dense_maxnorm: 0.25,
            n_classes: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self, n_times: usize) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.f1 == 0 || self.d == 0 {
            return bad("F1 and D must be >= 1".into());
        }
        if self.f2 != self.f1 * self.d {
            return bad(format!("F2 = {} must equal F1 x D = {}", self.f2, self.f1 * self.d));
        }
        if self.temporal_kernel == 0 || self.separable_kernel == 0 {
            return bad("kernel sizes must be >= 1".into());
        }
        if self.pool1 == 0 || self.pool2 == 0 {
            return bad("pool sizes must be >= 1".into());
        }
        if self.n_classes != 2 {
            return bad("only binary target/non-target decoding is supported (n_classes = 2)".into());
        }
        for (name, p) in [("dropout1", self.dropout1), ("dropout2", self.dropout2)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.depthwise_maxnorm > 0.0 && self.dense_maxnorm > 0.0) {
            return bad("max-norm bounds must be > 0".into());
        }
        if self.flat_len(n_times) == 0 {
            return bad(format!("{n_times} samples leave nothing after pooling by {} and {}", self.pool1, self.pool2));
        }
        Ok(())
    }

    pub fn n_spatial(&self) -> usize {
        self.f1 * self.d
    }

    /// Time length after each pooling stage (floor division drops the remainder).
    pub fn pooled_lens(&self, n_times: usize) -> (usize, usize) {
        let t1 = n_times / self.pool1;
        (t1, t1 / self.pool2)
    }

    pub fn flat_len(&self, n_times: usize) -> usize {
        self.f2 * self.pooled_lens(n_times).1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub class_weights: ClassWeights,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub target: f64,
    pub nontarget: f64,
}

impl ClassWeights {
    pub fn for_label(&self, is_target: bool) -> f64 {
        if is_target {
            self.target
        } else {
            self.nontarget
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 350,
            max_epochs: 500,
            patience: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            class_weights: ClassWeights { target: 2.0, nontarget: 1.0 },
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NetError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(NetError::Config("batch_size must be >= 1".into()));
        }
        if !(self.class_weights.target > 0.0 && self.class_weights.nontarget > 0.0) {
            return Err(NetError::Config("class weights must be > 0".into()));
        }
        Ok(())
    }
}
