//! Synthetic multichannel EEG for a [`SessionSchedule`].
//!
//! Background activity is independent per channel: 1/f^β noise plus a
//! 10 Hz alpha sinusoid with a random phase. Every target stimulus adds a
//! negative Gaussian deflection (N400-like, ~400 ms) scaled by a fixed
//! spatial topography; non-target stimuli add nothing. This is the stand-in
//! subject used for every statistical check in the crate.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epochs::extract_epochs;
use crate::evalstats::{cross_validate, EvalReport};
use crate::nnet::{NetConfig, TrainConfig};
use crate::seeds::{self, derive_seed, Stream};
use crate::session::{SessionSchedule, StimulusEvent, EPOCH_END_S};

/// Background noise standard deviation of the default subject (µV).
pub const DEFAULT_NOISE_STD_UV: f64 = 20.0;

/// The ERP envelope is evaluated out to this many widths; beyond it the
/// Gaussian is below 1.6e-8 of its peak.
const ERP_SUPPORT_SIGMAS: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid subject model: {field}: {reason}")]
    InvalidModel { field: &'static str, reason: String },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("calibration failed: {0}")]
    Calibration(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SynthError {
    SynthError::InvalidModel { field, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubjectModel {
    pub n_channels: usize,
    #[serde(rename = "erp_amplitude_uV")]
    pub erp_amplitude_uv: f64,
    pub erp_latency_s: f64,
    pub erp_width_s: f64,
    pub erp_topography: Vec<f64>,
    #[serde(rename = "noise_std_uV")]
    pub noise_std_uv: f64,
    pub pink_exponent: f64,
    #[serde(rename = "alpha_amplitude_uV")]
    pub alpha_amplitude_uv: f64,
    pub alpha_freq_hz: f64,
    pub latency_jitter_s: f64,
    pub rng_seed: u64,
}

impl Default for SubjectModel {
    fn default() -> Self {
        Self::with_channels(8)
    }
}

impl SubjectModel {
    /// Default subject with a smooth centro-parietal topography over `n` channels.
    pub fn with_channels(n: usize) -> Self {
        Self {
            n_channels: n,
            erp_amplitude_uv: 0.0,
            erp_latency_s: 0.4,
            erp_width_s: 0.12,
            erp_topography: default_topography(n),
            noise_std_uv: DEFAULT_NOISE_STD_UV,
            pink_exponent: 1.0,
            alpha_amplitude_uv: 2.0,
            alpha_freq_hz: 10.0,
            latency_jitter_s: 0.02,
            rng_seed: 0,
        }
    }

    pub fn with_amplitude(mut self, amplitude_uv: f64) -> Self {
        self.erp_amplitude_uv = amplitude_uv;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_channels < 1 {
            return Err(invalid("n_channels", "must be >= 1"));
        }
        if self.n_channels > u16::MAX as usize {
            return Err(invalid("n_channels", "must fit in u16"));
        }
        if !(self.noise_std_uv.is_finite() && self.noise_std_uv > 0.0) {
            return Err(invalid("noise_std_uV", "must be > 0"));
        }
        if !(self.erp_width_s.is_finite() && self.erp_width_s > 0.0) {
            return Err(invalid("erp_width_s", "must be > 0"));
        }
        if !(self.erp_amplitude_uv.is_finite() && self.erp_amplitude_uv >= 0.0) {
            return Err(invalid("erp_amplitude_uV", "must be >= 0"));
        }
        if self.erp_topography.len() != self.n_channels {
            return Err(invalid(
                "erp_topography",
                format!("has {} weights for {} channels", self.erp_topography.len(), self.n_channels),
            ));
        }
        if self.erp_topography.iter().any(|w| !(-1.0..=1.0).contains(w)) {
            return Err(invalid("erp_topography", "weights must lie in [-1, 1]"));
        }
        let lo = self.erp_latency_s - 3.0 * self.erp_width_s;
        let hi = self.erp_latency_s + 3.0 * self.erp_width_s;
        if !(lo >= 0.0 && hi <= EPOCH_END_S) {
            return Err(invalid(
                "erp_latency_s",
                format!("latency +/- 3 width spans [{lo:.3}, {hi:.3}] s, outside [0, {EPOCH_END_S}] s"),
            ));
        }
        for (field, v) in [
            ("pink_exponent", self.pink_exponent),
            ("alpha_amplitude_uV", self.alpha_amplitude_uv),
            ("alpha_freq_hz", self.alpha_freq_hz),
            ("latency_jitter_s", self.latency_jitter_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("subject serializes")
    }
}

pub fn default_topography(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let center = 0.6 * (n - 1) as f64;
    let width = 0.35 * n as f64;
    (0..n)
        .map(|c| {
            let z = (c as f64 - center) / width;
            (0.15 + 0.85 * (-z * z).exp()).min(1.0)
        })
        .collect()
}

/// Multichannel recording: samples are channel-major (`samples[c * n_samples + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub sampling_rate_hz: u32,
    pub n_channels: usize,
    pub n_samples: usize,
    pub samples: Vec<f32>,
    pub markers: Vec<StimulusEvent>,
}

impl Recording {
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn sample(&self, c: usize, t: usize) -> f32 {
        self.samples[c * self.n_samples + t]
    }
}

/// Zero-mean, unit-variance noise whose power spectrum falls as 1/f^exponent.
///
/// White Gaussian noise is shaped in the frequency domain (amplitude scaled
/// by f^(-exponent/2), DC removed) and renormalized.
pub fn pink_noise(n_samples: usize, exponent: f64, seed: u64) -> Result<Vec<f64>, SynthError> {
    if n_samples == 0 {
        return Err(SynthError::EmptyInput("pink_noise needs n_samples >= 1"));
    }
    let mut rng = seeds::rng(seed);
    let mut x: Vec<f64> = (0..n_samples).map(|_| StandardNormal.sample(&mut rng)).collect();
    if n_samples < 2 {
        return Ok(vec![0.0; n_samples]);
    }

    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n_samples);
    let inv = planner.plan_fft_inverse(n_samples);
    let mut spectrum = fwd.make_output_vec();
    fwd.process(&mut x, &mut spectrum).expect("fft length");
    spectrum[0] = 0.0.into();
    for (k, bin) in spectrum.iter_mut().enumerate().skip(1) {
        *bin *= (k as f64).powf(-exponent / 2.0);
    }
    // realfft requires purely real DC/Nyquist bins on inverse
    let last = spectrum.len() - 1;
    if n_samples.is_multiple_of(2) {
        spectrum[last].im = 0.0;
    }
    inv.process(&mut spectrum, &mut x).expect("fft length");

    let n = n_samples as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(vec![0.0; n_samples]);
    }
    Ok(x.into_iter().map(|v| (v - mean) / sd).collect())
}

/// The noise-free ERP contribution of one target stimulus at unit amplitude,
/// before the channel weight: `-exp(-(t - center)^2 / 2 width^2)`.
fn erp_envelope(t: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    -(-0.5 * z * z).exp()
}

/// Per-target latency jitter draws (seconds), in marker order. Non-target
/// markers get `None`.
fn latency_jitter(events: &[StimulusEvent], subject: &SubjectModel) -> Vec<Option<f64>> {
    let mut rng = seeds::rng(derive_seed(subject.rng_seed, Stream::Subject, u64::MAX));
    let normal = Normal::new(0.0, subject.latency_jitter_s.max(0.0)).expect("finite sigma");
    events
        .iter()
        .map(|e| e.is_target.then(|| normal.sample(&mut rng)))
        .collect()
}

/// Adds `amplitude * topography * envelope` for each target event into `field`
/// (channel-major, f64).
fn add_erp_field(
    field: &mut [f64],
    n_samples: usize,
    fs: f64,
    events: &[StimulusEvent],
    subject: &SubjectModel,
    amplitude: f64,
) {
    let jitter = latency_jitter(events, subject);
    let width = subject.erp_width_s * fs;
    let reach = (ERP_SUPPORT_SIGMAS * width).ceil() as i64;
    for (ev, j) in events.iter().zip(jitter) {
        let Some(j) = j else { continue };
        let center = ev.onset_sample as f64 + (subject.erp_latency_s + j) * fs;
        let lo = (center.round() as i64 - reach).max(0) as usize;
        let hi = ((center.round() as i64 + reach + 1).max(0) as usize).min(n_samples);
        for t in lo..hi {
            let g = amplitude * erp_envelope(t as f64, center, width);
            for (c, w) in subject.erp_topography.iter().enumerate() {
                field[c * n_samples + t] += w * g;
            }
        }
    }
}

/// The unit-amplitude ERP field the generator would add for `subject`
/// (channel-major, f64). Exposed for linearity checks and noise-free templates.
pub fn erp_field(schedule: &SessionSchedule, subject: &SubjectModel) -> Vec<f64> {
    let n = schedule.total_samples as usize;
    let mut field = vec![0.0; subject.n_channels * n];
    add_erp_field(&mut field, n, schedule.config.sampling_rate_hz as f64, &schedule.events, subject, 1.0);
    field
}

pub fn generate_recording(schedule: &SessionSchedule, subject: &SubjectModel) -> Result<Recording, SynthError> {
    subject.validate()?;
    let n = schedule.total_samples as usize;
    if n == 0 {
        return Err(SynthError::EmptyInput("schedule has no samples"));
    }
    let fs = schedule.config.sampling_rate_hz as f64;
    let n_ch = subject.n_channels;
    let mut field = vec![0.0f64; n_ch * n];

    let mut phase_rng = seeds::rng(derive_seed(subject.rng_seed, Stream::Subject, u64::MAX - 1));
    for c in 0..n_ch {
        let noise = pink_noise(n, subject.pink_exponent, derive_seed(subject.rng_seed, Stream::Subject, c as u64))?;
        let phase: f64 = phase_rng.random_range(0.0..2.0 * PI);
        let omega = 2.0 * PI * subject.alpha_freq_hz / fs;
        let row = &mut field[c * n..(c + 1) * n];
        for (t, (v, z)) in row.iter_mut().zip(noise).enumerate() {
            *v = subject.noise_std_uv * z + subject.alpha_amplitude_uv * (omega * t as f64 + phase).sin();
        }
    }
    if subject.erp_amplitude_uv > 0.0 {
        add_erp_field(&mut field, n, fs, &schedule.events, subject, subject.erp_amplitude_uv);
    }

    let samples: Vec<f32> = field.into_iter().map(|v| v as f32).collect();
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(invalid("noise_std_uV", "generated non-finite samples"));
    }
    Ok(Recording {
        sampling_rate_hz: schedule.config.sampling_rate_hz,
        n_channels: n_ch,
        n_samples: n,
        samples,
        markers: schedule.events.clone(),
    })
}

/// Settings for [`calibrate_snr`]; the decoder configuration is the one the
/// calibrated subject will later be evaluated with.
#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub upper_amplitude_uv: f64,
    pub max_iterations: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            train: TrainConfig::default(),
            folds: 10,
            seed: 0,
            tolerance: 0.03,
            upper_amplitude_uv: 50.0,
            max_iterations: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub amplitude_uv: f64,
    pub achieved_accuracy: f64,
    /// Every `(amplitude, mean CV accuracy)` pair evaluated, in order.
    pub evaluations: Vec<(f64, f64)>,
}

/// Mean cross-validated accuracy for `subject_base` rendered at `amplitude`.
pub fn evaluate_amplitude(
    amplitude: f64,
    schedule: &SessionSchedule,
    subject_base: &SubjectModel,
    opts: &CalibrationOptions,
) -> crate::Result<EvalReport> {
    let subject = subject_base.clone().with_amplitude(amplitude);
    let rec = generate_recording(schedule, &subject)?;
    let epochs = extract_epochs(&rec)?;
    let report = cross_validate(&epochs, &opts.net, &opts.train, opts.folds, opts.seed)?;
    Ok(report)
}

/// Bisection over ERP amplitude in `[0, upper_amplitude_uv]` until the mean
/// CV accuracy is within `tolerance` of `target_accuracy`.
///
/// The bracket must hold strictly: accuracy at 0 µV below the target and at
/// the upper bound above it, otherwise the target is unreachable.
pub fn calibrate_snr(
    target_accuracy: f64,
    schedule: &SessionSchedule,
    subject_base: &SubjectModel,
    opts: &CalibrationOptions,
) -> crate::Result<Calibration> {
    if !(target_accuracy > 0.5 && target_accuracy < 1.0) {
        return Err(SynthError::Calibration(format!("target accuracy {target_accuracy} outside (0.5, 1)")).into());
    }
    let mut evaluations = Vec::new();
    let mut eval = |a: f64| -> crate::Result<f64> {
        let acc = evaluate_amplitude(a, schedule, subject_base, opts)?.mean;
        evaluations.push((a, acc));
        Ok(acc)
    };

    let mut hi = opts.upper_amplitude_uv;
    let acc_hi = eval(hi)?;
    if acc_hi < target_accuracy {
        return Err(SynthError::Calibration(format!(
            "no bracket: accuracy {acc_hi:.4} at {hi} uV is below target {target_accuracy}"
        ))
        .into());
    }
    let mut lo = 0.0;
    let acc_lo = eval(lo)?;
    if acc_lo >= target_accuracy {
        return Err(SynthError::Calibration(format!(
            "no bracket: accuracy {acc_lo:.4} at 0 uV already reaches target {target_accuracy}"
        ))
        .into());
    }
    if (acc_hi - target_accuracy).abs() <= opts.tolerance {
        return Ok(Calibration { amplitude_uv: hi, achieved_accuracy: acc_hi, evaluations });
    }

    for _ in 0..opts.max_iterations {
        let mid = 0.5 * (lo + hi);
        let acc = eval(mid)?;
        if (acc - target_accuracy).abs() <= opts.tolerance {
            return Ok(Calibration { amplitude_uv: mid, achieved_accuracy: acc, evaluations });
        }
        if acc < target_accuracy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(SynthError::Calibration(format!(
        "no amplitude within +/-{} of {target_accuracy} after {} bisection steps (bracket [{lo}, {hi}])",
        opts.tolerance, opts.max_iterations
    ))
    .into())
}
