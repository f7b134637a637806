use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::model::{backward, forward_prepared, prepare, softmax_rows, weighted_cross_entropy, Mode, PreparedEpoch};
use super::weights::ModelWeights;
use super::{NetConfig, NetError, TrainConfig, BN_MOMENTUM, TARGET};
use crate::epochs::Epoch;
use crate::seeds::{derive_seed, rng, Stream};

/// Eval-mode inference is chunked to bound activation memory.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based training epoch whose weights were returned.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub history: History,
}

fn prepare_all(w: &ModelWeights, epochs: &[Epoch], moments: bool) -> Result<Vec<PreparedEpoch>, NetError> {
    epochs.iter().map(|e| prepare(&w.config, w.n_channels, w.n_times, &e.data, moments)).collect()
}

/// Eval-mode class-weighted loss over a whole set.
fn eval_loss(w: &ModelWeights, prepared: &[PreparedEpoch], labels: &[bool], cfg: &TrainConfig) -> Result<f64, NetError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (chunk, lab) in prepared.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let refs: Vec<&PreparedEpoch> = chunk.iter().collect();
        let (logits, _) = forward_prepared(w, &refs, Mode::Eval)?;
        let (loss, _) = weighted_cross_entropy(&logits, lab, &cfg.class_weights);
        let wsum: f64 = lab.iter().map(|&t| cfg.class_weights.for_label(t)).sum();
        num += loss * wsum;
        den += wsum;
    }
    Ok(num / den)
}

/// Mini-batch Adam with early stopping on the validation loss.
///
/// Each training epoch reshuffles, then steps through batches of
/// `batch_size` (the last one takes the remainder). When `val` is empty the
/// training loss drives early stopping instead. Returns the weights of the
/// best epoch.
pub fn train(
    train_set: &[Epoch],
    val_set: &[Epoch],
    n_channels: usize,
    n_times: usize,
    net: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, NetError> {
    cfg.validate()?;
    net.validate(n_times)?;
    if train_set.is_empty() {
        return Err(NetError::EmptyTrainingSet);
    }
    let labels: Vec<bool> = train_set.iter().map(|e| e.is_target()).collect();
    if labels.iter().all(|&t| t) || labels.iter().all(|&t| !t) {
        return Err(NetError::SingleClass);
    }
    let val_labels: Vec<bool> = val_set.iter().map(|e| e.is_target()).collect();

    let mut weights = ModelWeights::init(net, n_channels, n_times, &mut rng(derive_seed(cfg.rng_seed, Stream::NetInit, 0)))?;
    let prepared = prepare_all(&weights, train_set, true)?;
    let val_prepared = prepare_all(&weights, val_set, false)?;
    let mut shuffle_rng = rng(derive_seed(cfg.rng_seed, Stream::Shuffle, 0));
    let mut dropout_rng = rng(derive_seed(cfg.rng_seed, Stream::Dropout, 0));
    let mut state = AdamState::new(&weights);

    let mut history = History { train_loss: Vec::new(), val_loss: Vec::new(), best_epoch: 0, epochs_run: 0, stopped_early: false };
    let mut best = (f64::INFINITY, weights.clone());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut num = 0.0;
        let mut den = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedEpoch> = idx.iter().map(|&i| &prepared[i]).collect();
            let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = forward_prepared(&weights, &batch, Mode::Train(&mut dropout_rng))?;
            let cache = cache.ok_or(NetError::MissingCache)?;
            let (loss, grad) = weighted_cross_entropy(&logits, &y, &cfg.class_weights);
            let grads = backward(&weights, &cache, &grad)?;
            weights.update_running(&cache, BN_MOMENTUM);
            drop(cache);
            adam_step(&mut weights, &grads, &mut state, cfg)?;
            weights.check_max_norm()?;
            let wsum: f64 = y.iter().map(|&t| cfg.class_weights.for_label(t)).sum();
            num += loss * wsum;
            den += wsum;
        }
        let train_loss = num / den;
        let monitored = if val_set.is_empty() {
            train_loss
        } else {
            eval_loss(&weights, &val_prepared, &val_labels, cfg)?
        };
        history.train_loss.push(train_loss);
        history.val_loss.push(monitored);
        history.epochs_run = epoch + 1;
        if monitored < best.0 {
            best = (monitored, weights.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { weights: best.1, history })
}

/// Target-class probability for each prepared epoch (eval mode).
pub fn predict_proba_prepared(weights: &ModelWeights, prepared: &[PreparedEpoch]) -> Result<Vec<f64>, NetError> {
    let nc = weights.config.n_classes;
    let mut out = Vec::with_capacity(prepared.len());
    for chunk in prepared.chunks(EVAL_CHUNK) {
        let refs: Vec<&PreparedEpoch> = chunk.iter().collect();
        let (logits, _) = forward_prepared(weights, &refs, Mode::Eval)?;
        out.extend(softmax_rows(&logits, nc).chunks(nc).map(|r| r[TARGET]));
    }
    Ok(out)
}

/// Target-class probability for each `n_channels x n_times` epoch.
pub fn predict_proba(weights: &ModelWeights, epochs: &[&[f64]]) -> Result<Vec<f64>, NetError> {
    let prepared = epochs
        .iter()
        .map(|x| prepare(&weights.config, weights.n_channels, weights.n_times, x, false))
        .collect::<Result<Vec<_>, _>>()?;
    predict_proba_prepared(weights, &prepared)
}
