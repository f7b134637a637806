//! Labelled stimulus-locked windows.
//!
//! Each marker yields one epoch covering `[onset - 0.2 fs, onset + 1.85 fs)`
//! with the per-channel mean of the 0.2 s pre-stimulus segment subtracted.
//! The offline path ([`extract_epochs`]) and the streaming path
//! ([`OnlineEpocher`]) share the same window arithmetic and produce
//! bit-identical epochs.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iostream::{ByteReader, FormatError, StreamFrame};
use crate::session::{event_code_pack, window_samples, StimulusEvent};
use crate::synthgen::Recording;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpochError {
    #[error("marker {index} (onset {onset}, trial {trial_id}): window [{start}, {end}) outside [0, {n_samples})")]
    OutOfBounds { index: usize, onset: u64, trial_id: usize, start: i64, end: u64, n_samples: u64 },
    #[error("sampling rate {0} Hz does not put the window edges on whole samples")]
    InvalidRate(u32),
    #[error("channel {channel} has zero variance in the training epochs")]
    DegenerateChannel { channel: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("late marker at onset {onset}: window starts at {start} but samples before {buffer_start} were discarded")]
    LateMarker { onset: u64, start: u64, buffer_start: u64 },
    #[error("stream ended with {} incomplete epochs (onsets {pending:?})", pending.len())]
    IncompleteEpochs { pending: Vec<u64> },
    #[error("stream discontinuity: expected sample {expected}, frame starts at {found}")]
    Discontinuity { expected: u64, found: u64 },
    #[error("frame after END")]
    AfterEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Nontarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    /// Channel-major `n_channels x width` values.
    pub data: Vec<f64>,
    pub label: Label,
    pub trial_id: usize,
    pub option_position: usize,
    pub onset_sample: u64,
}

impl Epoch {
    pub fn is_target(&self) -> bool {
        self.label == Label::Target
    }
}

/// Per-channel z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    pub epochs: Vec<Epoch>,
    pub fs: u32,
    pub n_channels: usize,
    pub width: usize,
    pub normalization: Option<Normalization>,
}

impl EpochSet {
    pub fn n_targets(&self) -> usize {
        self.epochs.iter().filter(|e| e.is_target()).count()
    }

    /// Distinct trial ids in first-appearance order.
    pub fn trial_ids(&self) -> Vec<usize> {
        let mut seen = std::collections::HashSet::new();
        self.epochs.iter().filter(|e| seen.insert(e.trial_id)).map(|e| e.trial_id).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<Epoch> {
        idx.iter().map(|&i| self.epochs[i].clone()).collect()
    }
}

fn checked_window(fs: u32) -> Result<(usize, usize), EpochError> {
    if fs == 0 || !fs.is_multiple_of(20) {
        return Err(EpochError::InvalidRate(fs));
    }
    let (pre, post) = window_samples(fs);
    Ok((pre as usize, post as usize))
}

/// Builds one baseline-corrected epoch. `sample(c, k)` returns the raw value
/// at window offset `k` (0 = onset - pre) of channel `c`.
fn make_epoch(
    marker: &StimulusEvent,
    n_channels: usize,
    pre: usize,
    width: usize,
    sample: impl Fn(usize, usize) -> f32,
) -> Epoch {
    let mut data = Vec::with_capacity(n_channels * width);
    for c in 0..n_channels {
        let mut base = 0.0f64;
        for k in 0..pre {
            base += sample(c, k) as f64;
        }
        let base = if pre > 0 { base / pre as f64 } else { 0.0 };
        for k in 0..width {
            data.push(sample(c, k) as f64 - base);
        }
    }
    Epoch {
        data,
        label: if marker.is_target { Label::Target } else { Label::Nontarget },
        trial_id: marker.trial_id,
        option_position: marker.option_position,
        onset_sample: marker.onset_sample,
    }
}

pub fn extract_epochs(rec: &Recording) -> Result<EpochSet, EpochError> {
    let (pre, post) = checked_window(rec.sampling_rate_hz)?;
    let width = pre + post;
    let n = rec.n_samples as u64;
    let mut epochs = Vec::with_capacity(rec.markers.len());
    for (index, m) in rec.markers.iter().enumerate() {
        let start = m.onset_sample as i64 - pre as i64;
        let end = m.onset_sample + post as u64;
        if start < 0 || end > n {
            return Err(EpochError::OutOfBounds {
                index,
                onset: m.onset_sample,
                trial_id: m.trial_id,
                start,
                end,
                n_samples: n,
            });
        }
        let s = start as usize;
        epochs.push(make_epoch(m, rec.n_channels, pre, width, |c, k| rec.sample(c, s + k)));
    }
    Ok(EpochSet { epochs, fs: rec.sampling_rate_hz, n_channels: rec.n_channels, width, normalization: None })
}

impl Normalization {
    /// Per-channel mean and (population) standard deviation over every sample
    /// of every training epoch.
    pub fn fit(train: &[Epoch], n_channels: usize, width: usize) -> Result<Self, EpochError> {
        if train.is_empty() {
            return Err(EpochError::EmptyTrainingSet);
        }
        let count = (train.len() * width) as f64;
        let mut mean = vec![0.0; n_channels];
        let mut std = vec![0.0; n_channels];
        for c in 0..n_channels {
            let rows = || train.iter().flat_map(|e| e.data[c * width..(c + 1) * width].iter());
            let m = rows().sum::<f64>() / count;
            let v = rows().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
            let s = v.sqrt();
            if !(s > 0.0 && s.is_finite()) {
                return Err(EpochError::DegenerateChannel { channel: c });
            }
            mean[c] = m;
            std[c] = s;
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, epochs: &[Epoch], width: usize) -> Result<Vec<Epoch>, EpochError> {
        let n_ch = self.mean.len();
        epochs
            .iter()
            .map(|e| {
                if e.data.len() != n_ch * width {
                    return Err(EpochError::Shape(format!(
                        "epoch has {} values, expected {n_ch} x {width}",
                        e.data.len()
                    )));
                }
                let data = e
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let c = i / width;
                        (x - self.mean[c]) / self.std[c]
                    })
                    .collect();
                Ok(Epoch { data, ..e.clone() })
            })
            .collect()
    }
}

/// Z-scores `apply` with statistics computed on `train` only.
pub fn standardize(
    train: &[Epoch],
    apply: &[Epoch],
    n_channels: usize,
    width: usize,
) -> Result<(Vec<Epoch>, Normalization), EpochError> {
    let norm = Normalization::fit(train, n_channels, width)?;
    Ok((norm.apply(apply, width)?, norm))
}

/// Streaming counterpart of [`extract_epochs`].
///
/// Feed frames in order with [`OnlineEpocher::push`]; each call returns the
/// epochs completed by that frame. At most `width + chunk` samples per
/// channel are held at any time.
pub struct OnlineEpocher {
    n_channels: usize,
    pre: usize,
    width: usize,
    /// Per-channel samples; `buffer[c][0]` is absolute sample `buffer_start`.
    buffer: Vec<VecDeque<f32>>,
    buffer_start: u64,
    received: u64,
    pending: VecDeque<StimulusEvent>,
    max_buffered: usize,
    ended: bool,
}

impl OnlineEpocher {
    pub fn new(fs: u32, n_channels: usize) -> Result<Self, EpochError> {
        let (pre, post) = checked_window(fs)?;
        Ok(Self {
            n_channels,
            pre,
            width: pre + post,
            buffer: vec![VecDeque::new(); n_channels],
            buffer_start: 0,
            received: 0,
            pending: VecDeque::new(),
            max_buffered: 0,
            ended: false,
        })
    }

    /// Largest per-channel buffer length observed so far.
    pub fn max_buffered(&self) -> usize {
        self.max_buffered
    }

    pub fn push(&mut self, frame: StreamFrame) -> Result<Vec<Epoch>, EpochError> {
        if self.ended {
            return Err(EpochError::AfterEnd);
        }
        match frame {
            StreamFrame::Marker { onset_sample, event_code } => {
                let start = onset_sample.checked_sub(self.pre as u64).ok_or(EpochError::OutOfBounds {
                    index: 0,
                    onset: onset_sample,
                    trial_id: StimulusEvent::from_code(onset_sample, event_code).trial_id,
                    start: onset_sample as i64 - self.pre as i64,
                    end: onset_sample + (self.width - self.pre) as u64,
                    n_samples: self.received,
                })?;
                if start < self.buffer_start {
                    return Err(EpochError::LateMarker { onset: onset_sample, start, buffer_start: self.buffer_start });
                }
                self.pending.push_back(StimulusEvent::from_code(onset_sample, event_code));
                Ok(self.drain_complete())
            }
            StreamFrame::Samples { first_sample, n_channels, data } => {
                if n_channels != self.n_channels {
                    return Err(EpochError::Shape(format!(
                        "frame has {n_channels} channels, epocher expects {}",
                        self.n_channels
                    )));
                }
                if first_sample != self.received {
                    return Err(EpochError::Discontinuity { expected: self.received, found: first_sample });
                }
                let k = data.len() / n_channels;
                for frame in data.chunks_exact(n_channels) {
                    for (c, v) in frame.iter().enumerate() {
                        self.buffer[c].push_back(*v);
                    }
                }
                self.received += k as u64;
                self.max_buffered = self.max_buffered.max(self.buffer[0].len());
                let out = self.drain_complete();
                self.trim();
                Ok(out)
            }
            StreamFrame::End => {
                self.ended = true;
                if !self.pending.is_empty() {
                    return Err(EpochError::IncompleteEpochs {
                        pending: self.pending.iter().map(|m| m.onset_sample).collect(),
                    });
                }
                Ok(Vec::new())
            }
        }
    }

    fn drain_complete(&mut self) -> Vec<Epoch> {
        let mut out = Vec::new();
        while let Some(m) = self.pending.front() {
            let start = m.onset_sample - self.pre as u64;
            if start + self.width as u64 > self.received {
                break;
            }
            let off = (start - self.buffer_start) as usize;
            let buf = &self.buffer;
            out.push(make_epoch(m, self.n_channels, self.pre, self.width, |c, k| buf[c][off + k]));
            self.pending.pop_front();
        }
        out
    }

    fn trim(&mut self) {
        let mut keep_from = self.received.saturating_sub(self.width as u64);
        if let Some(m) = self.pending.front() {
            keep_from = keep_from.min(m.onset_sample - self.pre as u64);
        }
        if keep_from > self.buffer_start {
            let drop = (keep_from - self.buffer_start) as usize;
            for ch in &mut self.buffer {
                ch.drain(..drop.min(ch.len()));
            }
            self.buffer_start = keep_from;
        }
    }
}

/// Runs a whole frame sequence through an [`OnlineEpocher`].
pub fn online_epochs(
    frames: impl IntoIterator<Item = StreamFrame>,
    fs: u32,
    n_channels: usize,
) -> Result<Vec<Epoch>, EpochError> {
    let mut ep = OnlineEpocher::new(fs, n_channels)?;
    let mut out = Vec::new();
    for f in frames {
        out.extend(ep.push(f)?);
    }
    Ok(out)
}

// Epoch-set container, "AIE1": same little-endian conventions as AID1.
//   magic "AIE1", version u16 = 1, fs u32, n_channels u16, width u32, n_epochs u64,
//   has_norm u8, [n_channels x (mean f64, std f64)],
//   n_epochs x (onset u64, event_code u16, reserved u16, width x n_channels f64 frame-major)
pub const EPOCHS_MAGIC: [u8; 4] = *b"AIE1";

pub fn encode_epoch_set(set: &EpochSet) -> Result<Vec<u8>, EpochError> {
    let mut out = Vec::new();
    out.extend_from_slice(&EPOCHS_MAGIC);
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&set.fs.to_le_bytes());
    out.extend_from_slice(&(set.n_channels as u16).to_le_bytes());
    out.extend_from_slice(&(set.width as u32).to_le_bytes());
    out.extend_from_slice(&(set.epochs.len() as u64).to_le_bytes());
    match &set.normalization {
        Some(n) => {
            out.push(1);
            for c in 0..set.n_channels {
                out.extend_from_slice(&n.mean[c].to_le_bytes());
                out.extend_from_slice(&n.std[c].to_le_bytes());
            }
        }
        None => out.push(0),
    }
    for e in &set.epochs {
        let code = event_code_pack(e.trial_id, e.option_position, e.is_target())
            .map_err(|err| EpochError::Shape(err.to_string()))?;
        out.extend_from_slice(&e.onset_sample.to_le_bytes());
        out.extend_from_slice(&code.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        for t in 0..set.width {
            for c in 0..set.n_channels {
                out.extend_from_slice(&e.data[c * set.width + t].to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_epoch_set(bytes: &[u8]) -> Result<EpochSet, FormatError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != EPOCHS_MAGIC {
        return Err(FormatError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u16("header")?;
    if version != 1 {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let fs = r.u32("header")?;
    let n_channels = r.u16("header")? as usize;
    let width = r.u32("header")? as usize;
    let n_epochs = r.u64("header")? as usize;
    let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
    let normalization = match r.take(1, "header")?[0] {
        0 => None,
        1 => {
            let mut mean = Vec::with_capacity(n_channels);
            let mut std = Vec::with_capacity(n_channels);
            for _ in 0..n_channels {
                mean.push(f64_at(r.take(8, "normalization")?));
                std.push(f64_at(r.take(8, "normalization")?));
            }
            Some(Normalization { mean, std })
        }
        other => return Err(FormatError::InvalidField(format!("has_norm = {other}"))),
    };
    let record = 12 + n_channels * width * 8;
    let expected = record.saturating_mul(n_epochs);
    if r.remaining() < expected {
        return Err(FormatError::Truncated { section: "epoch records", expected, actual: r.remaining() });
    }
    let mut epochs = Vec::with_capacity(n_epochs);
    for _ in 0..n_epochs {
        let onset = r.u64("epoch records")?;
        let m = StimulusEvent::from_code(onset, r.u16("epoch records")?);
        let _reserved = r.u16("epoch records")?;
        let raw = r.take(n_channels * width * 8, "epoch records")?;
        let mut data = vec![0.0; n_channels * width];
        for (i, b) in raw.chunks_exact(8).enumerate() {
            let (t, c) = (i / n_channels, i % n_channels);
            data[c * width + t] = f64_at(b);
        }
        epochs.push(Epoch {
            data,
            label: if m.is_target { Label::Target } else { Label::Nontarget },
            trial_id: m.trial_id,
            option_position: m.option_position,
            onset_sample: onset,
        });
    }
    if r.remaining() != 0 {
        return Err(FormatError::CountMismatch(format!("{} trailing bytes after {n_epochs} epochs", r.remaining())));
    }
    Ok(EpochSet { epochs, fs, n_channels, width, normalization })
}

pub fn write_epoch_set(set: &EpochSet, path: impl AsRef<Path>) -> Result<(), crate::AidError> {
    let path = path.as_ref();
    let bytes = encode_epoch_set(set)?;
    std::fs::write(path, bytes).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

pub fn read_epoch_set(path: impl AsRef<Path>) -> Result<EpochSet, FormatError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })?;
    decode_epoch_set(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iostream::replay_stream;
    use crate::session::{build_schedule, SessionConfig};
    use crate::synthgen::{generate_recording, SubjectModel};

    fn recording(n_rounds: usize, trials: usize, amp: f64) -> Recording {
        let sched = build_schedule(&SessionConfig { n_rounds, trials_per_round: trials, rng_seed: 3, ..Default::default() })
            .unwrap();
        generate_recording(&sched, &SubjectModel::default().with_seed(3).with_amplitude(amp)).unwrap()
    }

    fn ramp_recording(onset: u64) -> Recording {
        let n = 2000;
        Recording {
            sampling_rate_hz: 200,
            n_channels: 2,
            n_samples: n,
            samples: (0..2 * n).map(|i| i as f32).collect(),
            markers: vec![StimulusEvent::from_code(onset, event_code_pack(0, 1, true).unwrap())],
        }
    }

    #[test]
    fn window_geometry() {
        let set = extract_epochs(&ramp_recording(1000)).unwrap();
        assert_eq!(set.width, 410);
        let e = &set.epochs[0];
        // Channel 0 holds value t at sample t; baseline is mean(960..1000) = 979.5.
        assert_eq!(e.data[0], 960.0 - 979.5);
        assert_eq!(e.data[409], 1369.0 - 979.5);
        assert_eq!(e.data.len(), 2 * 410);
        assert_eq!(e.label, Label::Target);
        assert_eq!((e.trial_id, e.option_position, e.onset_sample), (0, 1, 1000));
    }

    #[test]
    fn out_of_bounds_names_marker() {
        assert!(matches!(
            extract_epochs(&ramp_recording(39)),
            Err(EpochError::OutOfBounds { index: 0, onset: 39, .. })
        ));
        assert!(matches!(extract_epochs(&ramp_recording(1631)), Err(EpochError::OutOfBounds { .. })));
        assert!(extract_epochs(&ramp_recording(1630)).is_ok());
    }

    #[test]
    fn default_session_label_counts() {
        let sched = build_schedule(&SessionConfig::default()).unwrap();
        let rec = generate_recording(&sched, &SubjectModel::default().with_amplitude(5.0)).unwrap();
        let set = extract_epochs(&rec).unwrap();
        assert_eq!(set.epochs.len(), 480);
        assert_eq!(set.n_targets(), 160);
        assert_eq!(set.epochs.len() - set.n_targets(), 320);
        assert!(set.epochs.iter().all(|e| e.data.len() == 8 * 410 && e.data.iter().all(|v| v.is_finite())));
        for (e, m) in set.epochs.iter().zip(&rec.markers) {
            assert_eq!(e.onset_sample, m.onset_sample);
            assert_eq!(e.is_target(), m.is_target);
        }
    }

    #[test]
    fn constant_recording_gives_zero_epochs() {
        let mut rec = recording(1, 2, 0.0);
        rec.samples.iter_mut().for_each(|v| *v = 4.25);
        let set = extract_epochs(&rec).unwrap();
        assert!(set.epochs.iter().all(|e| e.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn baseline_invariance() {
        let rec = recording(1, 3, 4.0);
        let mut shifted = rec.clone();
        for c in 0..rec.n_channels {
            let k = 0.5 * (c as f32 + 1.0);
            for t in 0..rec.n_samples {
                shifted.samples[c * rec.n_samples + t] += k;
            }
        }
        let a = extract_epochs(&rec).unwrap();
        let b = extract_epochs(&shifted).unwrap();
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            for (u, v) in x.data.iter().zip(&y.data) {
                // f32 storage rounds the shifted samples
                assert!((u - v).abs() < 1e-4, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn standardize_on_train_is_zscore() {
        let set = extract_epochs(&recording(1, 4, 3.0)).unwrap();
        let (z, norm) = standardize(&set.epochs, &set.epochs, set.n_channels, set.width).unwrap();
        for c in 0..set.n_channels {
            let vals: Vec<f64> = z.iter().flat_map(|e| e.data[c * 410..(c + 1) * 410].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9, "c{c}: {m} {s}");
            assert!(norm.std[c] > 0.0);
        }
    }

    #[test]
    fn standardize_reuses_train_stats() {
        let set = extract_epochs(&recording(2, 4, 3.0)).unwrap();
        let (train, test) = set.epochs.split_at(12);
        let (z, norm) = standardize(train, test, set.n_channels, set.width).unwrap();
        let own = Normalization::fit(test, set.n_channels, set.width).unwrap();
        assert_ne!(norm, own);
        for (e, raw) in z.iter().zip(test) {
            for (i, v) in e.data.iter().enumerate() {
                let c = i / 410;
                assert_eq!(*v, (raw.data[i] - norm.mean[c]) / norm.std[c]);
            }
        }
        // test-fold channel means are not forced to zero
        let m0: f64 = z.iter().map(|e| e.data[..410].iter().sum::<f64>()).sum::<f64>() / (z.len() * 410) as f64;
        assert!(m0.abs() > 1e-6);
    }

    #[test]
    fn degenerate_channel() {
        let mut set = extract_epochs(&recording(1, 2, 0.0)).unwrap();
        for e in &mut set.epochs {
            e.data[410..820].iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(
            standardize(&set.epochs, &set.epochs, 8, 410).unwrap_err(),
            EpochError::DegenerateChannel { channel: 1 }
        );
        assert_eq!(standardize(&[], &set.epochs, 8, 410).unwrap_err(), EpochError::EmptyTrainingSet);
    }

    #[test]
    fn online_matches_offline_chunk1() {
        let rec = recording(1, 2, 6.0);
        let offline = extract_epochs(&rec).unwrap();
        let online = online_epochs(replay_stream(&rec, 1), rec.sampling_rate_hz, rec.n_channels).unwrap();
        assert_eq!(online.len(), 6);
        assert_eq!(online, offline.epochs);
    }

    #[test]
    fn online_memory_bound() {
        let rec = recording(1, 3, 1.0);
        for chunk in [1usize, 7, 64, 1000] {
            let mut ep = OnlineEpocher::new(200, rec.n_channels).unwrap();
            let mut n = 0;
            for f in replay_stream(&rec, chunk) {
                n += ep.push(f).unwrap().len();
            }
            assert_eq!(n, 9);
            assert!(ep.max_buffered() <= 410 + chunk, "chunk {chunk}: {}", ep.max_buffered());
        }
    }

    #[test]
    fn end_before_window_completes() {
        let rec = recording(1, 1, 0.0);
        let mut frames: Vec<_> = replay_stream(&rec, 50).collect();
        // stop the data shortly after the second onset
        let cut = rec.markers[1].onset_sample;
        frames.retain(|f| match f {
            StreamFrame::Samples { first_sample, .. } => *first_sample < cut,
            StreamFrame::Marker { onset_sample, .. } => *onset_sample <= cut,
            StreamFrame::End => true,
        });
        match online_epochs(frames, 200, rec.n_channels) {
            Err(EpochError::IncompleteEpochs { pending }) => {
                assert_eq!(pending, vec![rec.markers[1].onset_sample]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn late_marker() {
        let rec = recording(1, 1, 0.0);
        let m = rec.markers[0];
        let mut frames: Vec<_> = replay_stream(&rec, 100).filter(|f| !matches!(f, StreamFrame::Marker { .. })).collect();
        let end = frames.pop().unwrap();
        frames.push(StreamFrame::Marker { onset_sample: m.onset_sample, event_code: m.event_code });
        frames.push(end);
        assert!(matches!(online_epochs(frames, 200, rec.n_channels), Err(EpochError::LateMarker { .. })));
    }

    #[test]
    fn epoch_set_file_roundtrip() {
        let set = extract_epochs(&recording(1, 2, 2.0)).unwrap();
        let (z, norm) = standardize(&set.epochs, &set.epochs, 8, 410).unwrap();
        let set = EpochSet { epochs: z, normalization: Some(norm), ..set };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.aie1");
        write_epoch_set(&set, &p).unwrap();
        assert_eq!(read_epoch_set(&p).unwrap(), set);
        let bytes = encode_epoch_set(&set).unwrap();
        assert!(matches!(decode_epoch_set(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated { .. })));
    }
}
