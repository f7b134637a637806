//! Grouped k-fold cross-validation, accuracy metrics and label-permutation
//! significance tests.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epochs::{standardize, EpochSet, Normalization};
use crate::nnet::{self, History, ModelWeights, NetConfig, TrainConfig};
use crate::seeds::{derive_seed, rng, Stream};
use crate::AidError;

/// Fraction of training-fold trials held out for early stopping.
pub const INNER_VALIDATION_FRACTION: f64 = 0.1;

/// Permutation draws per parallel work unit; each unit has its own derived
/// stream, so results do not depend on the thread count.
const PERMUTATION_CHUNK: usize = 1000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<AidError>,
    },
}

/// Trial-to-fold map. Every epoch of a trial lands in the trial's fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Distinct trial ids, in first-appearance order.
    pub trial_ids: Vec<usize>,
    /// `fold_of[i]` is the fold of `trial_ids[i]`.
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_map(&self) -> HashMap<usize, usize> {
        self.trial_ids.iter().copied().zip(self.fold_of.iter().copied()).collect()
    }

    /// Fold index of each epoch of `set`.
    pub fn epoch_folds(&self, set: &EpochSet) -> Vec<usize> {
        let map = self.fold_map();
        set.epochs.iter().map(|e| map[&e.trial_id]).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.fold_of.iter().for_each(|&f| sizes[f] += 1);
        sizes
    }
}

/// Random partition of the trials into `k` folds whose sizes differ by at
/// most one. Every trial holds one target and the same number of
/// non-targets, so stratifying would change nothing.
pub fn make_folds(set: &EpochSet, k: usize, seed: u64) -> Result<FoldAssignment, EvalError> {
    let trial_ids = set.trial_ids();
    if k < 2 {
        return Err(EvalError::Config(format!("k = {k}: need at least 2 folds")));
    }
    if k > trial_ids.len() {
        return Err(EvalError::Config(format!("k = {k} exceeds the {} available trials", trial_ids.len())));
    }
    let mut order: Vec<usize> = (0..trial_ids.len()).collect();
    order.shuffle(&mut rng(derive_seed(seed, Stream::Folds, 0)));
    let mut fold_of = vec![0; trial_ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        fold_of[i] = rank % k;
    }
    Ok(FoldAssignment { k, trial_ids, fold_of })
}

/// Cross-validation results. `p_value` and `n_permutations` are filled by
/// [`evaluate`]; `predictions[i]` and `labels[i]` refer to epoch `i` of the
/// evaluated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_fold_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub balanced_accuracy: f64,
    pub auc: f64,
    pub predictions: Vec<f64>,
    pub labels: Vec<u8>,
    pub p_value: Option<f64>,
    pub n_permutations: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn predicted_targets(&self) -> Vec<bool> {
        self.predictions.iter().map(|&p| p > 0.5).collect()
    }

    pub fn target_labels(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == 1).collect()
    }
}

/// Fraction of `scores > 0.5` that agree with `labels`.
pub fn accuracy(scores: &[f64], labels: &[bool]) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s > 0.5) == l).count();
    hits as f64 / labels.len() as f64
}

/// Mean of the per-class recalls over the classes that occur.
pub fn balanced_accuracy(scores: &[f64], labels: &[bool]) -> f64 {
    let mut recalls = Vec::new();
    for class in [false, true] {
        let (mut n, mut hit) = (0usize, 0usize);
        for (&s, &l) in scores.iter().zip(labels) {
            if l == class {
                n += 1;
                hit += usize::from((s > 0.5) == class);
            }
        }
        if n > 0 {
            recalls.push(hit as f64 / n as f64);
        }
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Area under the ROC curve from the Mann-Whitney rank sum with midranks for
/// ties. Returns 0.5 when only one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&r| labels[idx[r]]).count() as f64 * mid;
        i = j + 1;
    }
    (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Trains on the epochs `fit_pool` of `set`: holds out 10% of their trials
/// (at least one when there are two or more) for early stopping, z-scores
/// with the statistics of the remaining epochs, and trains. `split` selects
/// the derived seeds for the validation split and training.
pub fn fit_model(
    set: &EpochSet,
    fit_pool: &[usize],
    net: &NetConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    split: u64,
) -> Result<(ModelWeights, Normalization, History), AidError> {
    let mut trials: Vec<usize> = {
        let mut seen = HashSet::new();
        fit_pool.iter().map(|&i| set.epochs[i].trial_id).filter(|t| seen.insert(*t)).collect()
    };
    trials.shuffle(&mut rng(derive_seed(seed, Stream::InnerSplit, split)));
    let n_val = if trials.len() >= 2 {
        ((trials.len() as f64 * INNER_VALIDATION_FRACTION).floor() as usize).max(1)
    } else {
        0
    };
    let val_trials: HashSet<usize> = trials[..n_val].iter().copied().collect();
    let (val_idx, fit_idx): (Vec<usize>, Vec<usize>) = fit_pool.iter().copied().partition(|&i| val_trials.contains(&set.epochs[i].trial_id));
    let fit_raw = set.subset(&fit_idx);
    let (fit, norm) = standardize(&fit_raw, &fit_raw, set.n_channels, set.width)?;
    let val = norm.apply(&set.subset(&val_idx), set.width)?;
    let cfg = TrainConfig { rng_seed: derive_seed(seed, Stream::FoldTraining, split), ..train_cfg.clone() };
    let outcome = nnet::train(&fit, &val, set.n_channels, set.width, net, &cfg)?;
    Ok((outcome.weights, norm, outcome.history))
}

/// Trains and predicts one fold; returns held-out epoch indices and scores.
fn run_fold(
    set: &EpochSet,
    epoch_fold: &[usize],
    fold: usize,
    net: &NetConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<usize>, Vec<f64>), AidError> {
    let (test_idx, pool): (Vec<usize>, Vec<usize>) = (0..set.epochs.len()).partition(|&i| epoch_fold[i] == fold);
    let (weights, norm, _) = fit_model(set, &pool, net, train_cfg, seed, fold as u64)?;
    let test = norm.apply(&set.subset(&test_idx), set.width)?;
    let refs: Vec<&[f64]> = test.iter().map(|e| e.data.as_slice()).collect();
    let scores = nnet::predict_proba(&weights, &refs)?;
    Ok((test_idx, scores))
}

/// Grouped k-fold CV. Per fold: carve an inner validation split (10% of the
/// training trials) for early stopping, z-score with the remaining training
/// epochs' statistics, train, and predict the held-out fold. Fold seeds derive
/// from `seed` and the fold index (the `rng_seed` of `train_cfg` is replaced),
/// so the report does not depend on how folds are scheduled.
pub fn cross_validate(set: &EpochSet, net: &NetConfig, train_cfg: &TrainConfig, k: usize, seed: u64) -> Result<EvalReport, EvalError> {
    let folds = make_folds(set, k, seed)?;
    let epoch_fold = folds.epoch_folds(set);
    let results: Vec<Result<(Vec<usize>, Vec<f64>), EvalError>> = (0..k)
        .into_par_iter()
        .map(|f| run_fold(set, &epoch_fold, f, net, train_cfg, seed).map_err(|e| EvalError::Fold { fold: f, source: Box::new(e) }))
        .collect();

    let labels: Vec<bool> = set.epochs.iter().map(|e| e.is_target()).collect();
    let mut predictions = vec![f64::NAN; set.epochs.len()];
    let mut per_fold_accuracy = Vec::with_capacity(k);
    for r in results {
        let (idx, scores) = r?;
        let fold_labels: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        per_fold_accuracy.push(accuracy(&scores, &fold_labels));
        for (i, s) in idx.into_iter().zip(scores) {
            predictions[i] = s;
        }
    }
    Ok(report_from_predictions(per_fold_accuracy, predictions, &labels))
}

/// Assembles a report (without permutation fields) from per-fold accuracies
/// and pooled out-of-fold scores.
pub fn report_from_predictions(per_fold_accuracy: Vec<f64>, predictions: Vec<f64>, labels: &[bool]) -> EvalReport {
    let (mean, std) = mean_std(&per_fold_accuracy);
    EvalReport {
        mean,
        std,
        balanced_accuracy: balanced_accuracy(&predictions, labels),
        auc: auc(&predictions, labels),
        per_fold_accuracy,
        predictions,
        labels: labels.iter().map(|&l| u8::from(l)).collect(),
        p_value: None,
        n_permutations: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p_value: f64,
    pub observed_accuracy: f64,
    pub n_permutations: usize,
    /// Number of permuted accuracies `>=` the observed one.
    pub n_at_least: usize,
    pub null_mean: f64,
    pub null_std: f64,
    pub null_min: f64,
    pub null_max: f64,
}

/// Null distribution of accuracy for fixed predictions against uniformly
/// permuted labels; `p = (1 + #{null >= observed}) / (n + 1)`.
pub fn permutation_test(predictions: &[bool], labels: &[bool], n_permutations: usize, seed: u64) -> Result<PermutationResult, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Usage(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.len() < 2 {
        return Err(EvalError::Usage("permutation test needs at least 2 items".into()));
    }
    if n_permutations == 0 {
        return Err(EvalError::Usage("n_permutations must be >= 1".into()));
    }
    let matches = |lab: &[bool]| predictions.iter().zip(lab).filter(|(p, l)| p == l).count();
    let observed = matches(labels);
    let n_chunks = n_permutations.div_ceil(PERMUTATION_CHUNK);
    let null: Vec<usize> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng(derive_seed(seed, Stream::Permutation, c as u64));
            let mut lab = labels.to_vec();
            let len = PERMUTATION_CHUNK.min(n_permutations - c * PERMUTATION_CHUNK);
            (0..len)
                .map(|_| {
                    lab.shuffle(&mut r);
                    matches(&lab)
                })
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect();
    let n_at_least = null.iter().filter(|&&m| m >= observed).count();
    let len = labels.len() as f64;
    let accs: Vec<f64> = null.iter().map(|&m| m as f64 / len).collect();
    let (null_mean, null_std) = mean_std(&accs);
    Ok(PermutationResult {
        p_value: (1 + n_at_least) as f64 / (n_permutations + 1) as f64,
        observed_accuracy: observed as f64 / len,
        n_permutations,
        n_at_least,
        null_mean,
        null_std,
        null_min: accs.iter().cloned().fold(f64::INFINITY, f64::min),
        null_max: accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Cross-validation followed by a permutation test on the pooled
/// out-of-fold predictions.
pub fn evaluate(
    set: &EpochSet,
    net: &NetConfig,
    train_cfg: &TrainConfig,
    k: usize,
    n_permutations: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if n_permutations == 0 {
        return Err(EvalError::Usage("n_permutations must be >= 1".into()));
    }
    let mut report = cross_validate(set, net, train_cfg, k, seed)?;
    let perm = permutation_test(&report.predicted_targets(), &report.target_labels(), n_permutations, seed)?;
    report.p_value = Some(perm.p_value);
    report.n_permutations = n_permutations;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_subjects: usize,
    pub alpha: f64,
    pub significant_count: usize,
    /// Mean over subjects of each subject's mean fold accuracy.
    pub mean_of_means: f64,
    /// Population std of the subjects' mean accuracies.
    pub dispersion: f64,
    pub min_mean: f64,
    pub max_mean: f64,
    /// Mean over subjects of the per-fold accuracy std.
    pub mean_fold_std: f64,
    pub subject_means: Vec<f64>,
    pub subject_p_values: Vec<f64>,
}

pub fn summarize_cohort(reports: &[EvalReport], alpha: f64) -> Result<CohortSummary, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Usage("cohort summary needs at least one report".into()));
    }
    let p: Vec<f64> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| r.p_value.ok_or_else(|| EvalError::Usage(format!("report {i} has no permutation p-value"))))
        .collect::<Result<_, _>>()?;
    let means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
    let (mean_of_means, dispersion) = mean_std(&means);
    let stds: Vec<f64> = reports.iter().map(|r| r.std).collect();
    Ok(CohortSummary {
        n_subjects: reports.len(),
        alpha,
        significant_count: p.iter().filter(|&&v| v < alpha).count(),
        mean_of_means,
        dispersion,
        min_mean: means.iter().cloned().fold(f64::INFINITY, f64::min),
        max_mean: means.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean_fold_std: mean_std(&stds).0,
        subject_means: means,
        subject_p_values: p,
    })
}
