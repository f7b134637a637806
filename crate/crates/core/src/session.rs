//! The experimental protocol as data.
//!
//! A session is `n_rounds` rounds of `trials_per_round` trials. Each trial
//! primes one three-digit number and then presents `options_per_trial`
//! distinct numbers in sequence, exactly one of which equals the prime.
//! Everything downstream (signal synthesis, epoching, scoring) is driven by
//! the [`SessionSchedule`] built here.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

/// Window of an epoch relative to stimulus onset, in seconds.
pub const EPOCH_START_S: f64 = -0.2;
pub const EPOCH_END_S: f64 = 1.85;

/// Duration of the spoken prime that opens every trial.
pub const PRIME_DURATION_S: f64 = 1.0;

pub const MIN_NUMBER: u16 = 100;
pub const MAX_NUMBER: u16 = 999;

/// Limits imposed by the 16-bit event code layout.
pub const MAX_TRIALS: usize = 1 << 12;
pub const MAX_OPTIONS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("invalid session config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("event code field out of range: {0}")]
    Encoding(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SessionError {
    SessionError::InvalidConfig { field, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub n_rounds: usize,
    pub trials_per_round: usize,
    pub options_per_trial: usize,
    pub sampling_rate_hz: u32,
    pub soa_s: f64,
    pub prime_gap_s: f64,
    pub inter_trial_gap_s: f64,
    pub inter_round_break_s: f64,
    pub rng_seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            n_rounds: 20,
            trials_per_round: 8,
            options_per_trial: 3,
            sampling_rate_hz: 200,
            soa_s: 2.5,
            prime_gap_s: 2.0,
            inter_trial_gap_s: 3.0,
            inter_round_break_s: 15.0,
            rng_seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        if self.n_rounds < 1 {
            return Err(invalid("n_rounds", "must be >= 1"));
        }
        if self.trials_per_round < 1 {
            return Err(invalid("trials_per_round", "must be >= 1"));
        }
        if self.options_per_trial < 2 {
            return Err(invalid("options_per_trial", "must be >= 2"));
        }
        if self.options_per_trial > MAX_OPTIONS {
            return Err(invalid(
                "options_per_trial",
                format!("must be <= {MAX_OPTIONS} (event code has 2 position bits)"),
            ));
        }
        if self.n_trials() > MAX_TRIALS {
            return Err(invalid(
                "n_rounds",
                format!("n_rounds * trials_per_round must be <= {MAX_TRIALS}"),
            ));
        }
        let fs = self.sampling_rate_hz;
        if fs == 0 {
            return Err(invalid("sampling_rate_hz", "must be > 0"));
        }
        // 0.2 * fs and 1.85 * fs are integral iff fs is a multiple of 20.
        if !fs.is_multiple_of(20) {
            return Err(invalid(
                "sampling_rate_hz",
                format!("{fs} Hz does not put the -0.2 s / 1.85 s window edges on samples"),
            ));
        }
        let min_soa = (EPOCH_END_S - EPOCH_START_S) + 1.0 / fs as f64;
        if !(self.soa_s.is_finite() && self.soa_s >= min_soa) {
            return Err(invalid("soa_s", format!("must be >= {min_soa:.4} s so epochs never overlap")));
        }
        for (field, v) in [
            ("prime_gap_s", self.prime_gap_s),
            ("inter_trial_gap_s", self.inter_trial_gap_s),
            ("inter_round_break_s", self.inter_round_break_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn n_trials(&self) -> usize {
        self.n_rounds * self.trials_per_round
    }

    pub fn seconds_to_samples(&self, s: f64) -> u64 {
        (s * self.sampling_rate_hz as f64).round() as u64
    }

    /// Samples before and after onset covered by an epoch: `(0.2 fs, 1.85 fs)`.
    pub fn window_samples(&self) -> (u64, u64) {
        window_samples(self.sampling_rate_hz)
    }
}

/// `(pre, post)` sample counts of the epoch window at `fs` (a multiple of 20).
pub fn window_samples(fs: u32) -> (u64, u64) {
    let fs = fs as u64;
    (fs / 5, fs * 37 / 20)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: usize,
    pub round_id: usize,
    pub primed_number: u16,
    pub options: Vec<u16>,
    pub target_position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StimulusEvent {
    pub onset_sample: u64,
    pub trial_id: usize,
    pub option_position: usize,
    pub is_target: bool,
    pub event_code: u16,
}

impl StimulusEvent {
    pub fn from_code(onset_sample: u64, event_code: u16) -> Self {
        let (trial_id, option_position, is_target) = event_code_unpack(event_code);
        Self { onset_sample, trial_id, option_position, is_target, event_code }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSchedule {
    pub config: SessionConfig,
    pub trials: Vec<Trial>,
    pub events: Vec<StimulusEvent>,
    pub total_samples: u64,
}

impl SessionSchedule {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Bits 15..4 trial id, bits 3..2 option position, bit 1 reserved, bit 0 target flag.
pub fn event_code_pack(trial_id: usize, option_position: usize, is_target: bool) -> Result<u16, SessionError> {
    if trial_id >= MAX_TRIALS {
        return Err(SessionError::Encoding(format!("trial_id {trial_id} >= {MAX_TRIALS}")));
    }
    if option_position >= MAX_OPTIONS {
        return Err(SessionError::Encoding(format!("option_position {option_position} >= {MAX_OPTIONS}")));
    }
    Ok(((trial_id as u16) << 4) | ((option_position as u16) << 2) | is_target as u16)
}

pub fn event_code_unpack(code: u16) -> (usize, usize, bool) {
    ((code >> 4) as usize, ((code >> 2) & 0b11) as usize, code & 1 == 1)
}

/// Lay out the full session timeline.
///
/// Each trial: prime (1 s), `prime_gap_s` silence, then one stimulus every
/// `soa_s`. The trial closes one SOA after its last onset, followed by
/// `inter_trial_gap_s`; rounds are separated by `inter_round_break_s`.
pub fn build_schedule(config: &SessionConfig) -> Result<SessionSchedule, SessionError> {
    config.validate()?;
    let mut rng = seeds::rng(config.rng_seed);

    let soa = config.seconds_to_samples(config.soa_s);
    let lead = config.seconds_to_samples(PRIME_DURATION_S + config.prime_gap_s);
    let trial_gap = config.seconds_to_samples(config.inter_trial_gap_s);
    let round_break = config.seconds_to_samples(config.inter_round_break_s);
    let (pre, _) = config.window_samples();

    let n_opt = config.options_per_trial;
    let mut trials = Vec::with_capacity(config.n_trials());
    let mut events = Vec::with_capacity(config.n_trials() * n_opt);
    let pool: Vec<u16> = (MIN_NUMBER..=MAX_NUMBER).collect();

    // The first window must start at or after sample 0.
    let mut cursor = 0u64;
    for round_id in 0..config.n_rounds {
        if round_id > 0 {
            cursor += round_break;
        }
        for k in 0..config.trials_per_round {
            if k > 0 {
                cursor += trial_gap;
            }
            let trial_id = trials.len();
            let options: Vec<u16> = pool.choose_multiple(&mut rng, n_opt).copied().collect();
            let target_position = rng.random_range(0..n_opt);
            let primed_number = options[target_position];

            let first_onset = (cursor + lead).max(pre);
            for (pos, _) in options.iter().enumerate() {
                let is_target = pos == target_position;
                events.push(StimulusEvent {
                    onset_sample: first_onset + pos as u64 * soa,
                    trial_id,
                    option_position: pos,
                    is_target,
                    event_code: event_code_pack(trial_id, pos, is_target)?,
                });
            }
            cursor = first_onset + n_opt as u64 * soa;
            trials.push(Trial { trial_id, round_id, primed_number, options, target_position });
        }
    }

    Ok(SessionSchedule { config: config.clone(), trials, events, total_samples: cursor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_schedule_counts() {
        let s = build_schedule(&SessionConfig::default()).unwrap();
        assert_eq!(s.trials.len(), 160);
        assert_eq!(s.events.len(), 480);
        assert_eq!(s.events.iter().filter(|e| e.is_target).count(), 160);
        assert_eq!(s.events.iter().filter(|e| !e.is_target).count(), 320);
    }

    #[test]
    fn minimal_schedule() {
        let cfg = SessionConfig { n_rounds: 1, trials_per_round: 1, ..Default::default() };
        let s = build_schedule(&cfg).unwrap();
        assert_eq!(s.trials.len(), 1);
        assert_eq!(s.events.len(), 3);
        assert_eq!(s.events.iter().filter(|e| e.is_target).count(), 1);
    }

    #[test]
    fn timeline_invariants() {
        let cfg = SessionConfig { rng_seed: 99, ..Default::default() };
        let s = build_schedule(&cfg).unwrap();
        let soa = cfg.seconds_to_samples(cfg.soa_s);
        let min_gap = (2.05 * cfg.sampling_rate_hz as f64).ceil() as u64;
        let (pre, post) = cfg.window_samples();
        for w in s.events.windows(2) {
            assert!(w[1].onset_sample > w[0].onset_sample);
            assert!(w[1].onset_sample - w[0].onset_sample >= min_gap);
            if w[0].trial_id == w[1].trial_id {
                assert_eq!(w[1].onset_sample - w[0].onset_sample, soa);
            }
        }
        for e in &s.events {
            assert!(e.onset_sample >= pre);
            assert!(e.onset_sample + post <= s.total_samples);
        }
        for t in &s.trials {
            assert_eq!(t.options[t.target_position], t.primed_number);
            for (i, a) in t.options.iter().enumerate() {
                assert!((MIN_NUMBER..=MAX_NUMBER).contains(a));
                assert!(t.options[i + 1..].iter().all(|b| b != a));
            }
            let tev: Vec<_> = s.events.iter().filter(|e| e.trial_id == t.trial_id).collect();
            assert_eq!(tev.iter().filter(|e| e.is_target).count(), 1);
        }
    }

    #[test]
    fn round_breaks_are_inserted() {
        let cfg = SessionConfig { n_rounds: 2, trials_per_round: 2, ..Default::default() };
        let s = build_schedule(&cfg).unwrap();
        // first event of trial 1 vs trial 2 (trial 2 opens round 1); the
        // break takes the place of the inter-trial gap
        let first = |tid: usize| s.events.iter().find(|e| e.trial_id == tid).unwrap().onset_sample;
        let within = first(1) - first(0);
        let across = first(2) - first(1);
        let gap = cfg.seconds_to_samples(cfg.inter_trial_gap_s);
        assert_eq!(across + gap - within, cfg.seconds_to_samples(cfg.inter_round_break_s));
    }

    #[test]
    fn schedule_is_pure() {
        let cfg = SessionConfig { rng_seed: 5, ..Default::default() };
        let a = build_schedule(&cfg).unwrap();
        let b = build_schedule(&cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = build_schedule(&SessionConfig { rng_seed: 6, ..cfg }).unwrap();
        assert_ne!(a.trials, c.trials);
    }

    #[test]
    fn json_field_names() {
        let s = build_schedule(&SessionConfig { n_rounds: 1, trials_per_round: 1, ..Default::default() }).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        for k in ["config", "trials", "events", "total_samples"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        for k in ["trial_id", "round_id", "primed_number", "options", "target_position"] {
            assert!(v["trials"][0].get(k).is_some(), "{k}");
        }
        for k in ["onset_sample", "trial_id", "option_position", "is_target", "event_code"] {
            assert!(v["events"][0].get(k).is_some(), "{k}");
        }
        assert_eq!(SessionSchedule::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases: Vec<(SessionConfig, &str)> = vec![
            (SessionConfig { n_rounds: 0, ..Default::default() }, "n_rounds"),
            (SessionConfig { trials_per_round: 0, ..Default::default() }, "trials_per_round"),
            (SessionConfig { options_per_trial: 1, ..Default::default() }, "options_per_trial"),
            (SessionConfig { options_per_trial: 5, ..Default::default() }, "options_per_trial"),
            (SessionConfig { sampling_rate_hz: 128, ..Default::default() }, "sampling_rate_hz"),
            (SessionConfig { soa_s: 2.05, ..Default::default() }, "soa_s"),
            (SessionConfig { inter_trial_gap_s: -1.0, ..Default::default() }, "inter_trial_gap_s"),
        ];
        for (cfg, field) in cases {
            match build_schedule(&cfg) {
                Err(SessionError::InvalidConfig { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn event_code_examples() {
        assert_eq!(event_code_pack(0, 0, false).unwrap(), 0x0000);
        assert_eq!(event_code_pack(1, 2, true).unwrap(), 0x0019);
        assert_eq!(event_code_pack(4095, 3, true).unwrap(), 0xFFFD);
        assert!(event_code_pack(4096, 0, false).is_err());
        assert!(event_code_pack(0, 4, false).is_err());
    }

    #[test]
    fn target_position_is_uniform() {
        // Pearson chi-square over 10,000 single-trial schedules, df = 2.
        let n = 10_000;
        let mut counts = [0usize; 3];
        for seed in 0..n as u64 {
            let cfg = SessionConfig { n_rounds: 1, trials_per_round: 1, rng_seed: seed, ..Default::default() };
            counts[build_schedule(&cfg).unwrap().trials[0].target_position] += 1;
        }
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square(2) upper 1% point
        assert!(chi2 < 9.2103, "chi2 = {chi2}, counts = {counts:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn event_code_roundtrip(tid in 0usize..4096, pos in 0usize..4, tgt: bool) {
            let code = event_code_pack(tid, pos, tgt).unwrap();
            prop_assert_eq!(event_code_unpack(code), (tid, pos, tgt));
            prop_assert_eq!(code & 0b10, 0);
        }
    }
}
