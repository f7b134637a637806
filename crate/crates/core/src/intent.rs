//! Trial-level intention decisions from per-stimulus target probabilities.
//!
//! Each option's probability is clamped to `[1e-6, 1 - 1e-6]` and mapped to
//! log-odds. Repeated presentations add their log-odds, which is the Bayes
//! combination for independent, calibrated repetitions. The softmax of the
//! (summed) log-odds is the posterior over options.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::pipeline::{self, ModelBundle};
use crate::seeds::{derive_seed, Stream};
use crate::session::{build_schedule, SessionConfig};
use crate::synthgen::{generate_recording, SubjectModel};

pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntentError {
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScores {
    pub trial_id: usize,
    /// Target probability per option, in presentation order.
    pub probabilities: Vec<f64>,
    pub repetition_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub trial_id: usize,
    pub chosen_option: usize,
    pub confidence: Vec<f64>,
    pub tie_flag: bool,
}

pub fn log_odds(p: f64) -> f64 {
    let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (q / (1.0 - q)).ln()
}

fn check(scores: &TrialScores) -> Result<(), IntentError> {
    if scores.probabilities.len() < 2 {
        return Err(IntentError::Usage(format!(
            "trial {}: need at least 2 option scores, got {}",
            scores.trial_id,
            scores.probabilities.len()
        )));
    }
    if let Some(p) = scores.probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(IntentError::Usage(format!("trial {}: probability {p} outside [0, 1]", scores.trial_id)));
    }
    Ok(())
}

/// Posterior and decision from per-option evidence (summed log-odds).
/// Exact ties go to the lowest index and raise `tie_flag`.
pub fn select(trial_id: usize, evidence: &[f64]) -> Selection {
    let max = evidence.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let expd: Vec<f64> = evidence.iter().map(|e| (e - max).exp()).collect();
    let z: f64 = expd.iter().sum();
    let confidence = expd.iter().map(|e| e / z).collect();
    let chosen_option = evidence.iter().position(|&e| e == max).unwrap_or(0);
    let tie_flag = evidence.iter().filter(|&&e| e == max).count() > 1;
    Selection { trial_id, chosen_option, confidence, tie_flag }
}

pub fn decode_trial(scores: &TrialScores) -> Result<Selection, IntentError> {
    accumulate(std::slice::from_ref(scores))
}

pub fn accumulate(repetitions: &[TrialScores]) -> Result<Selection, IntentError> {
    let first = repetitions.first().ok_or_else(|| IntentError::Usage("no repetitions to accumulate".into()))?;
    let n = first.probabilities.len();
    let mut evidence = vec![0.0; n];
    for r in repetitions {
        check(r)?;
        if r.trial_id != first.trial_id {
            return Err(IntentError::Usage(format!("mixed trial ids {} and {}", first.trial_id, r.trial_id)));
        }
        if r.probabilities.len() != n {
            return Err(IntentError::Usage(format!(
                "trial {}: repetitions have {} and {} options",
                r.trial_id,
                n,
                r.probabilities.len()
            )));
        }
        for (e, &p) in evidence.iter_mut().zip(&r.probabilities) {
            *e += log_odds(p);
        }
    }
    Ok(select(first.trial_id, &evidence))
}

/// One Selection per line.
pub fn to_json_lines(selections: &[Selection]) -> String {
    selections.iter().map(|s| serde_json::to_string(s).expect("selection serializes") + "\n").collect()
}

/// Wilson score interval for `k` successes out of `n` at two-sided level
/// `1 - alpha`.
pub fn wilson_interval(k: usize, n: usize, alpha: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let (n, p) = (n as f64, k as f64 / n as f64);
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// One-sided p-value for "proportion `k1/n1` exceeds proportion `k2/n2`"
/// (pooled two-proportion z-test).
pub fn one_sided_proportion_p(k1: usize, n1: usize, k2: usize, n2: usize) -> f64 {
    let (p1, p2) = (k1 as f64 / n1 as f64, k2 as f64 / n2 as f64);
    let pooled = (k1 + k2) as f64 / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return if p1 > p2 { 0.0 } else { 1.0 };
    }
    1.0 - Normal::standard().cdf((p1 - p2) / se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub repetitions: usize,
    pub n_trials: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Selection accuracy after accumulating 1..=`r_max` presentations.
///
/// Builds one fresh schedule with at least `min_trials` trials, renders it
/// `r_max` times with independent background EEG (same subject, new noise
/// seed per repetition), scores every epoch with `model`, and decodes each
/// trial from its first `R` repetitions. Intervals are 95% Wilson intervals.
pub fn selection_accuracy_curve(
    subject: &SubjectModel,
    model: &ModelBundle,
    session: &SessionConfig,
    r_max: usize,
    min_trials: usize,
    seed: u64,
) -> crate::Result<Vec<CurvePoint>> {
    if r_max == 0 {
        return Err(IntentError::Usage("r_max must be >= 1".into()).into());
    }
    let per_round = session.trials_per_round.max(1);
    let cfg = SessionConfig {
        n_rounds: min_trials.div_ceil(per_round).max(1),
        rng_seed: derive_seed(seed, Stream::Schedule, 0),
        ..session.clone()
    };
    let schedule = build_schedule(&cfg)?;
    let mut reps: Vec<Vec<(TrialScores, Option<usize>)>> = Vec::with_capacity(r_max);
    for r in 0..r_max {
        let subj = subject.clone().with_seed(derive_seed(seed, Stream::Repetition, r as u64));
        let rec = generate_recording(&schedule, &subj)?;
        let mut trials = pipeline::score_recording(model, &rec)?;
        trials.iter_mut().for_each(|(t, _)| t.repetition_index = r);
        reps.push(trials);
    }
    let n_trials = reps[0].len();
    let mut out = Vec::with_capacity(r_max);
    for big_r in 1..=r_max {
        let mut correct = 0;
        for i in 0..n_trials {
            let set: Vec<TrialScores> = reps[..big_r].iter().map(|rep| rep[i].0.clone()).collect();
            let sel = accumulate(&set)?;
            if Some(sel.chosen_option) == reps[0][i].1 {
                correct += 1;
            }
        }
        let (lo, hi) = wilson_interval(correct, n_trials, 0.05);
        out.push(CurvePoint {
            repetitions: big_r,
            n_trials,
            n_correct: correct,
            accuracy: correct as f64 / n_trials as f64,
            ci_low: lo,
            ci_high: hi,
        });
    }
    Ok(out)
}
