//! Train / decode / replay workflows built from the individual modules.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::epochs::{extract_epochs, Epoch, EpochSet, Normalization, OnlineEpocher};
use crate::evalstats::fit_model;
use crate::intent::{decode_trial, IntentError, Selection, TrialScores};
use crate::iostream::{spawn_replay, FormatError, StreamFrame};
use crate::nnet::{decode_records, encode_records, predict_proba, History, ModelWeights, NetConfig, NetError, TrainConfig};
use crate::synthgen::Recording;

/// A trained classifier together with the input standardization it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub weights: ModelWeights,
    pub normalization: Normalization,
    pub fs: u32,
}

impl ModelBundle {
    /// Weight records plus `norm.mean`, `norm.std` and `input.fs`, in the
    /// AIW1 container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records = self.weights.records();
        let c = self.normalization.mean.len();
        records.push(("norm.mean".into(), vec![c], self.normalization.mean.clone()));
        records.push(("norm.std".into(), vec![c], self.normalization.std.clone()));
        records.push(("input.fs".into(), vec![], vec![self.fs as f64]));
        encode_records(&records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let records = decode_records(bytes)?;
        let weights = ModelWeights::from_records(&records)?;
        let get = |name: &str| {
            records
                .iter()
                .find(|r| r.0 == name)
                .map(|r| r.2.clone())
                .ok_or_else(|| NetError::Format(format!("missing record {name}")))
        };
        let (mean, std) = (get("norm.mean")?, get("norm.std")?);
        if mean.len() != weights.n_channels || std.len() != weights.n_channels {
            return Err(NetError::Format("normalization length does not match the channel count".into()));
        }
        let fs = get("input.fs")?;
        Ok(Self { weights, normalization: Normalization { mean, std }, fs: fs[0] as u32 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| FormatError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| FormatError::Io { path: path.to_path_buf(), source: e })?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Trains one model on every epoch of `set` (10% of trials held out for early
/// stopping).
pub fn train_model(set: &EpochSet, net: &NetConfig, train: &TrainConfig, seed: u64) -> crate::Result<(ModelBundle, History)> {
    let all: Vec<usize> = (0..set.epochs.len()).collect();
    let (weights, normalization, history) = fit_model(set, &all, net, train, seed, u64::MAX)?;
    Ok((ModelBundle { weights, normalization, fs: set.fs }, history))
}

/// Target probability for raw (baseline-corrected, unstandardized) epochs.
pub fn score_epochs(model: &ModelBundle, epochs: &[Epoch]) -> crate::Result<Vec<f64>> {
    let z = model.normalization.apply(epochs, model.weights.n_times)?;
    let refs: Vec<&[f64]> = z.iter().map(|e| e.data.as_slice()).collect();
    Ok(predict_proba(&model.weights, &refs)?)
}

/// Collects per-option scores into trials (first-appearance order). Each
/// trial must contain every option position exactly once. The second item
/// is the true target position when one is labelled.
pub fn group_trials(epochs: &[Epoch], scores: &[f64]) -> Result<Vec<(TrialScores, Option<usize>)>, IntentError> {
    let mut order = Vec::new();
    let mut by_trial: HashMap<usize, Vec<(usize, f64, bool)>> = HashMap::new();
    for (e, &s) in epochs.iter().zip(scores) {
        by_trial
            .entry(e.trial_id)
            .or_insert_with(|| {
                order.push(e.trial_id);
                Vec::new()
            })
            .push((e.option_position, s, e.is_target()));
    }
    order
        .into_iter()
        .map(|id| {
            let items = &by_trial[&id];
            trial_from_items(id, items)
        })
        .collect()
}

fn trial_from_items(trial_id: usize, items: &[(usize, f64, bool)]) -> Result<(TrialScores, Option<usize>), IntentError> {
    let n = items.len();
    let mut probabilities = vec![f64::NAN; n];
    let mut target = None;
    for &(pos, s, is_target) in items {
        if pos >= n || !probabilities[pos].is_nan() {
            return Err(IntentError::Usage(format!("trial {trial_id}: option positions are not 0..{n} exactly once")));
        }
        probabilities[pos] = s;
        if is_target {
            target = Some(pos);
        }
    }
    Ok((TrialScores { trial_id, probabilities, repetition_index: 0 }, target))
}

pub fn score_recording(model: &ModelBundle, rec: &Recording) -> crate::Result<Vec<(TrialScores, Option<usize>)>> {
    check_recording(model, rec.sampling_rate_hz, rec.n_channels)?;
    let set = extract_epochs(rec)?;
    let scores = score_epochs(model, &set.epochs)?;
    Ok(group_trials(&set.epochs, &scores)?)
}

fn check_recording(model: &ModelBundle, fs: u32, n_channels: usize) -> crate::Result<()> {
    if fs != model.fs || n_channels != model.weights.n_channels {
        return Err(IntentError::Usage(format!(
            "recording is {n_channels} channels at {fs} Hz, model expects {} channels at {} Hz",
            model.weights.n_channels, model.fs
        ))
        .into());
    }
    Ok(())
}

/// Decoded trial with its ground-truth target position, when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedTrial {
    pub selection: Selection,
    pub target_option: Option<usize>,
}

/// Offline path: epoch the whole recording, score, decode every trial.
pub fn decode_offline(model: &ModelBundle, rec: &Recording) -> crate::Result<Vec<DecodedTrial>> {
    score_recording(model, rec)?
        .into_iter()
        .map(|(t, target)| Ok(DecodedTrial { selection: decode_trial(&t)?, target_option: target }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub n_trials: usize,
    pub n_epochs: usize,
    pub n_labelled: usize,
    pub n_correct: usize,
    pub accuracy: Option<f64>,
    pub ties: usize,
    /// Largest per-channel sample buffer held by the online epocher.
    pub max_buffered_samples: usize,
}

pub fn summarize(decoded: &[DecodedTrial], n_epochs: usize, max_buffered_samples: usize) -> ReplaySummary {
    let labelled: Vec<&DecodedTrial> = decoded.iter().filter(|d| d.target_option.is_some()).collect();
    let n_correct = labelled.iter().filter(|d| d.target_option == Some(d.selection.chosen_option)).count();
    ReplaySummary {
        n_trials: decoded.len(),
        n_epochs,
        n_labelled: labelled.len(),
        n_correct,
        accuracy: (!labelled.is_empty()).then(|| n_correct as f64 / labelled.len() as f64),
        ties: decoded.iter().filter(|d| d.selection.tie_flag).count(),
        max_buffered_samples,
    }
}

/// Online path: a producer thread streams the recording as encoded frames of
/// `chunk` samples; the consumer decodes frames, epochs them incrementally,
/// scores each epoch as soon as its window is complete and decodes a trial
/// once all `options_per_trial` options are scored. `on_trial` sees each
/// trial as it is decoded.
pub fn replay_decode(
    model: &ModelBundle,
    rec: Recording,
    chunk: usize,
    options_per_trial: usize,
    mut on_trial: impl FnMut(&DecodedTrial),
) -> crate::Result<(Vec<DecodedTrial>, ReplaySummary)> {
    if chunk == 0 {
        return Err(IntentError::Usage("chunk must be >= 1 sample".into()).into());
    }
    if options_per_trial < 2 {
        return Err(IntentError::Usage("options_per_trial must be >= 2".into()).into());
    }
    check_recording(model, rec.sampling_rate_hz, rec.n_channels)?;
    let n_channels = rec.n_channels;
    let mut epocher = OnlineEpocher::new(rec.sampling_rate_hz, n_channels)?;
    let rx = spawn_replay(rec, chunk, 64);
    let mut open: HashMap<usize, Vec<(usize, f64, bool)>> = HashMap::new();
    let mut decoded = Vec::new();
    let mut n_epochs = 0;
    let mut saw_end = false;
    for bytes in rx {
        let frame = StreamFrame::decode(&bytes, n_channels)?;
        saw_end |= frame == StreamFrame::End;
        let epochs = epocher.push(frame)?;
        if epochs.is_empty() {
            continue;
        }
        n_epochs += epochs.len();
        let scores = score_epochs(model, &epochs)?;
        for (e, s) in epochs.iter().zip(scores) {
            let items = open.entry(e.trial_id).or_default();
            items.push((e.option_position, s, e.is_target()));
            if items.len() == options_per_trial {
                let items = open.remove(&e.trial_id).unwrap();
                let (t, target) = trial_from_items(e.trial_id, &items)?;
                let d = DecodedTrial { selection: decode_trial(&t)?, target_option: target };
                on_trial(&d);
                decoded.push(d);
            }
        }
    }
    if !saw_end {
        return Err(FormatError::Truncated { section: "replay stream", expected: 1, actual: 0 }.into());
    }
    if let Some(id) = open.keys().min() {
        return Err(IntentError::Usage(format!(
            "trial {id} ended with {} of {options_per_trial} options scored",
            open[id].len()
        ))
        .into());
    }
    let summary = summarize(&decoded, n_epochs, epocher.max_buffered());
    Ok((decoded, summary))
}

pub fn selections(decoded: &[DecodedTrial]) -> Vec<Selection> {
    decoded.iter().map(|d| d.selection.clone()).collect()
}
