//! AID1 recording files and the framed replay stream.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic      [u8; 4] = "AID1"
//! version    u16     = 1
//! fs_hz      u32
//! n_channels u16
//! n_samples  u64
//! samples    n_samples x n_channels x f32   (frame-major: all channels of t=0, then t=1, ...)
//! n_markers  u32
//! markers    n_markers x (onset_sample u64, event_code u16, reserved u16 = 0)
//! ```
//!
//! Stream frame: `frame_type u8, payload_len u32, payload`, where
//! SAMPLES (1) = `first_sample u64` + k x n_channels x f32 (frame-major),
//! MARKER (2) = `onset_sample u64, event_code u16`, END (3) = empty.

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver};
use std::thread;

use thiserror::Error;

use crate::session::StimulusEvent;
use crate::synthgen::Recording;

pub const MAGIC: [u8; 4] = *b"AID1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 8;
const MARKER_RECORD_LEN: usize = 8 + 2 + 2;

pub const FRAME_SAMPLES: u8 = 1;
pub const FRAME_MARKER: u8 = 2;
pub const FRAME_END: u8 = 3;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:02x?}, expected \"AID1\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {0} (supported: 1)")]
    UnsupportedVersion(u16),
    #[error("truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated { section: &'static str, expected: usize, actual: usize },
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("invalid stream frame: {0}")]
    InvalidFrame(String),
    #[error("stream i/o: {0}")]
    Stream(#[from] io::Error),
}

impl FormatError {
    pub fn with_path(self, path: &Path) -> FormatError {
        match self {
            FormatError::Stream(source) => FormatError::Io { path: path.to_path_buf(), source },
            other => other,
        }
    }
}

/// Little-endian cursor over an in-memory buffer with truncation reporting.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { section, expected: n, actual: self.remaining() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, section: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, section: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, section: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}

pub fn encode_recording(rec: &Recording) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + rec.samples.len() * 4 + 4 + rec.markers.len() * MARKER_RECORD_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rec.sampling_rate_hz.to_le_bytes());
    out.extend_from_slice(&(rec.n_channels as u16).to_le_bytes());
    out.extend_from_slice(&(rec.n_samples as u64).to_le_bytes());
    for t in 0..rec.n_samples {
        for c in 0..rec.n_channels {
            out.extend_from_slice(&rec.sample(c, t).to_le_bytes());
        }
    }
    out.extend_from_slice(&(rec.markers.len() as u32).to_le_bytes());
    for m in &rec.markers {
        out.extend_from_slice(&m.onset_sample.to_le_bytes());
        out.extend_from_slice(&m.event_code.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

pub fn decode_recording(bytes: &[u8]) -> Result<Recording, FormatError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u16("header")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let fs = r.u32("header")?;
    let n_channels = r.u16("header")? as usize;
    let n_samples = r.u64("header")?;
    let payload = (n_samples as u128) * (n_channels as u128) * 4;
    if payload > r.remaining() as u128 {
        return Err(FormatError::Truncated {
            section: "sample payload",
            expected: usize::try_from(payload).unwrap_or(usize::MAX),
            actual: r.remaining(),
        });
    }
    let n_samples = n_samples as usize;
    let raw = r.take(payload as usize, "sample payload")?;
    let mut samples = vec![0f32; n_channels * n_samples];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let (t, c) = (i / n_channels, i % n_channels);
        samples[c * n_samples + t] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    let n_markers = r.u32("marker count")? as usize;
    let table = n_markers * MARKER_RECORD_LEN;
    if r.remaining() < table {
        return Err(FormatError::Truncated { section: "marker table", expected: table, actual: r.remaining() });
    }
    let mut markers = Vec::with_capacity(n_markers);
    for i in 0..n_markers {
        let onset = r.u64("marker table")?;
        let code = r.u16("marker table")?;
        let reserved = r.u16("marker table")?;
        if reserved != 0 {
            return Err(FormatError::InvalidField(format!("marker {i}: reserved field is {reserved}, expected 0")));
        }
        markers.push(StimulusEvent::from_code(onset, code));
    }
    if r.remaining() != 0 {
        return Err(FormatError::CountMismatch(format!(
            "{} trailing bytes after {n_markers} declared markers",
            r.remaining()
        )));
    }
    Ok(Recording { sampling_rate_hz: fs, n_channels, n_samples, samples, markers })
}

pub fn write_recording(rec: &Recording, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    std::fs::write(path, encode_recording(rec)).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

pub fn read_recording(path: impl AsRef<Path>) -> Result<Recording, FormatError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })?;
    decode_recording(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamFrame {
    /// `data` is frame-major: `data[k * n_channels + c]`.
    Samples { first_sample: u64, n_channels: usize, data: Vec<f32> },
    Marker { onset_sample: u64, event_code: u16 },
    End,
}

impl StreamFrame {
    pub fn frame_type(&self) -> u8 {
        match self {
            StreamFrame::Samples { .. } => FRAME_SAMPLES,
            StreamFrame::Marker { .. } => FRAME_MARKER,
            StreamFrame::End => FRAME_END,
        }
    }

    pub fn n_frames(&self) -> usize {
        match self {
            StreamFrame::Samples { n_channels, data, .. } => data.len() / n_channels,
            _ => 0,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        match self {
            StreamFrame::Samples { first_sample, data, .. } => {
                payload.reserve(8 + data.len() * 4);
                payload.extend_from_slice(&first_sample.to_le_bytes());
                for v in data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            StreamFrame::Marker { onset_sample, event_code } => {
                payload.extend_from_slice(&onset_sample.to_le_bytes());
                payload.extend_from_slice(&event_code.to_le_bytes());
            }
            StreamFrame::End => {}
        }
        let mut out = Vec::with_capacity(5 + payload.len());
        out.push(self.frame_type());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Reads one frame. The channel count is not on the wire; the consumer
    /// knows it from the stream's recording header.
    pub fn read_from(reader: &mut impl Read, n_channels: usize) -> Result<StreamFrame, FormatError> {
        let mut head = [0u8; 5];
        reader.read_exact(&mut head)?;
        let len = u32::from_le_bytes(head[1..5].try_into().unwrap()) as usize;
        let mut payload = vec![0u8; len];
        reader.read_exact(&mut payload)?;
        Self::decode_payload(head[0], &payload, n_channels)
    }

    pub fn decode(bytes: &[u8], n_channels: usize) -> Result<StreamFrame, FormatError> {
        let mut r = ByteReader::new(bytes);
        let kind = r.take(1, "frame type")?[0];
        let len = r.u32("frame length")? as usize;
        if r.remaining() != len {
            return Err(FormatError::InvalidFrame(format!(
                "length prefix {len} but {} payload bytes",
                r.remaining()
            )));
        }
        Self::decode_payload(kind, r.take(len, "frame payload")?, n_channels)
    }

    fn decode_payload(kind: u8, payload: &[u8], n_channels: usize) -> Result<StreamFrame, FormatError> {
        let mut r = ByteReader::new(payload);
        let frame = match kind {
            FRAME_SAMPLES => {
                let first_sample = r.u64("samples frame")?;
                let body = r.remaining();
                if n_channels == 0 || !body.is_multiple_of(4 * n_channels) {
                    return Err(FormatError::InvalidFrame(format!(
                        "samples payload of {body} bytes is not a whole number of {n_channels}-channel frames"
                    )));
                }
                let data = r
                    .take(body, "samples frame")?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                StreamFrame::Samples { first_sample, n_channels, data }
            }
            FRAME_MARKER => {
                let onset_sample = r.u64("marker frame")?;
                let event_code = r.u16("marker frame")?;
                StreamFrame::Marker { onset_sample, event_code }
            }
            FRAME_END => StreamFrame::End,
            other => return Err(FormatError::InvalidFrame(format!("unknown frame type {other}"))),
        };
        if r.remaining() != 0 {
            return Err(FormatError::InvalidFrame(format!("{} unexpected payload bytes", r.remaining())));
        }
        Ok(frame)
    }
}

/// Lazily yields the replay frames of a recording: markers whose onset falls
/// inside a chunk precede that chunk's SAMPLES frame; the stream ends with END.
pub struct ReplayStream<'a> {
    rec: &'a Recording,
    chunk: usize,
    next_sample: usize,
    next_marker: usize,
    done: bool,
}

impl Iterator for ReplayStream<'_> {
    type Item = StreamFrame;

    fn next(&mut self) -> Option<StreamFrame> {
        if self.done {
            return None;
        }
        if self.next_sample >= self.rec.n_samples {
            // markers past the end of the data still get delivered
            if let Some(m) = self.rec.markers.get(self.next_marker) {
                self.next_marker += 1;
                return Some(StreamFrame::Marker { onset_sample: m.onset_sample, event_code: m.event_code });
            }
            self.done = true;
            return Some(StreamFrame::End);
        }
        let end = (self.next_sample + self.chunk).min(self.rec.n_samples);
        if let Some(m) = self.rec.markers.get(self.next_marker) {
            if (m.onset_sample as usize) < end {
                self.next_marker += 1;
                return Some(StreamFrame::Marker { onset_sample: m.onset_sample, event_code: m.event_code });
            }
        }
        let n_ch = self.rec.n_channels;
        let mut data = Vec::with_capacity((end - self.next_sample) * n_ch);
        for t in self.next_sample..end {
            for c in 0..n_ch {
                data.push(self.rec.sample(c, t));
            }
        }
        let frame = StreamFrame::Samples { first_sample: self.next_sample as u64, n_channels: n_ch, data };
        self.next_sample = end;
        Some(frame)
    }
}

/// Replay `rec` as frames of at most `chunk_samples` samples. Panics if `chunk_samples == 0`.
pub fn replay_stream(rec: &Recording, chunk_samples: usize) -> ReplayStream<'_> {
    assert!(chunk_samples >= 1, "chunk_samples must be >= 1");
    ReplayStream { rec, chunk: chunk_samples, next_sample: 0, next_marker: 0, done: false }
}

/// Runs the replay on a producer thread that pushes encoded frames through a
/// bounded channel of `capacity` frames; the producer blocks while it is full.
pub fn spawn_replay(rec: Recording, chunk_samples: usize, capacity: usize) -> Receiver<Vec<u8>> {
    let (tx, rx) = mpsc::sync_channel(capacity);
    thread::spawn(move || {
        for frame in replay_stream(&rec, chunk_samples) {
            if tx.send(frame.encode()).is_err() {
                break;
            }
        }
    });
    rx
}

/// Writes the full encoded frame stream to `w`.
pub fn write_stream(rec: &Recording, chunk_samples: usize, w: &mut impl Write) -> io::Result<()> {
    for frame in replay_stream(rec, chunk_samples) {
        w.write_all(&frame.encode())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(markers: Vec<StimulusEvent>) -> Recording {
        Recording {
            sampling_rate_hz: 200,
            n_channels: 1,
            n_samples: 4,
            samples: vec![1.0, -2.5, f32::MIN_POSITIVE, 3.25],
            markers,
        }
    }

    fn two_channel() -> Recording {
        let n = 50;
        Recording {
            sampling_rate_hz: 200,
            n_channels: 2,
            n_samples: n,
            samples: (0..2 * n).map(|i| i as f32 * 0.5 - 7.0).collect(),
            markers: vec![StimulusEvent::from_code(3, 0x0011), StimulusEvent::from_code(20, 0x0014)],
        }
    }

    #[test]
    fn file_size_matches_layout() {
        let bytes = encode_recording(&tiny(vec![]));
        assert_eq!(bytes.len(), 4 + 2 + 4 + 2 + 8 + 16 + 4);
        assert_eq!(&bytes[..4], &[0x41, 0x49, 0x44, 0x31]);
        assert_eq!(decode_recording(&bytes).unwrap(), tiny(vec![]));
    }

    #[test]
    fn samples_are_frame_major() {
        let rec = two_channel();
        let bytes = encode_recording(&rec);
        let f = |i: usize| f32::from_le_bytes(bytes[HEADER_LEN + 4 * i..HEADER_LEN + 4 * i + 4].try_into().unwrap());
        assert_eq!(f(0), rec.sample(0, 0));
        assert_eq!(f(1), rec.sample(1, 0));
        assert_eq!(f(2), rec.sample(0, 1));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.aid1");
        let rec = two_channel();
        write_recording(&rec, &path).unwrap();
        assert_eq!(read_recording(&path).unwrap(), rec);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_recording(&tiny(vec![]));
        bytes[0] = b'X';
        assert!(matches!(decode_recording(&bytes), Err(FormatError::BadMagic { .. })));
        assert!(matches!(decode_recording(&[]), Err(FormatError::Truncated { section: "magic", .. })));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode_recording(&tiny(vec![]));
        bytes[4] = 2;
        assert!(matches!(decode_recording(&bytes), Err(FormatError::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let bytes = encode_recording(&tiny(vec![]));
        let cut = &bytes[..HEADER_LEN + 10];
        match decode_recording(cut) {
            Err(FormatError::Truncated { section, expected, actual }) => {
                assert_eq!(section, "sample payload");
                assert_eq!((expected, actual), (16, 10));
            }
            other => panic!("{other:?}"),
        }
        let rec = tiny(vec![StimulusEvent::from_code(1, 0x11)]);
        let bytes = encode_recording(&rec);
        assert!(matches!(
            decode_recording(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { section: "marker table", expected: 12, actual: 9 })
        ));
    }

    #[test]
    fn trailing_bytes_and_reserved_field() {
        let mut bytes = encode_recording(&tiny(vec![StimulusEvent::from_code(1, 0x11)]));
        bytes.push(0);
        assert!(matches!(decode_recording(&bytes), Err(FormatError::CountMismatch(_))));
        bytes.pop();
        let n = bytes.len();
        bytes[n - 1] = 1;
        assert!(matches!(decode_recording(&bytes), Err(FormatError::InvalidField(_))));
    }

    #[test]
    fn missing_file_has_path_context() {
        let err = read_recording("/nonexistent/x.aid1").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.aid1"));
    }

    #[test]
    fn single_chunk_replay() {
        let rec = two_channel();
        let frames: Vec<_> = replay_stream(&rec, rec.n_samples).collect();
        assert_eq!(frames.len(), 4);
        assert!(matches!(frames[0], StreamFrame::Marker { onset_sample: 3, .. }));
        assert!(matches!(frames[1], StreamFrame::Marker { onset_sample: 20, .. }));
        assert!(matches!(frames[2], StreamFrame::Samples { first_sample: 0, .. }));
        assert_eq!(frames[3], StreamFrame::End);
    }

    #[test]
    fn markers_precede_their_chunk_and_reassembly_is_exact() {
        let rec = two_channel();
        for chunk in [1, 3, 7, 64] {
            let mut rebuilt = vec![0f32; rec.samples.len()];
            let mut received = 0usize;
            let mut pending: Vec<u64> = Vec::new();
            for frame in replay_stream(&rec, chunk) {
                let bytes = frame.encode();
                assert_eq!(StreamFrame::decode(&bytes, 2).unwrap(), frame);
                match frame {
                    StreamFrame::Marker { onset_sample, .. } => {
                        assert!(onset_sample as usize >= received);
                        pending.push(onset_sample);
                    }
                    StreamFrame::Samples { first_sample, data, .. } => {
                        assert_eq!(first_sample as usize, received);
                        let k = data.len() / 2;
                        for i in 0..k {
                            for c in 0..2 {
                                rebuilt[c * rec.n_samples + received + i] = data[i * 2 + c];
                            }
                        }
                        received += k;
                        pending.retain(|&o| o as usize >= received);
                    }
                    StreamFrame::End => assert_eq!(received, rec.n_samples),
                }
            }
            assert!(pending.is_empty());
            assert_eq!(rebuilt, rec.samples);
        }
    }

    #[test]
    fn bounded_producer_consumer() {
        let rec = two_channel();
        let expected: Vec<_> = replay_stream(&rec, 5).map(|f| f.encode()).collect();
        let rx = spawn_replay(rec, 5, 2);
        let got: Vec<_> = rx.iter().collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn byte_stream_roundtrip() {
        let rec = two_channel();
        let mut buf = Vec::new();
        write_stream(&rec, 7, &mut buf).unwrap();
        let mut cur = io::Cursor::new(buf);
        let mut frames = Vec::new();
        loop {
            let f = StreamFrame::read_from(&mut cur, 2).unwrap();
            let end = f == StreamFrame::End;
            frames.push(f);
            if end {
                break;
            }
        }
        assert_eq!(frames, replay_stream(&rec, 7).collect::<Vec<_>>());
    }

    #[test]
    fn bad_frames() {
        assert!(StreamFrame::decode(&[9, 0, 0, 0, 0], 1).is_err());
        assert!(StreamFrame::decode(&[2, 3, 0, 0, 0, 1, 2, 3], 1).is_err());
        let mut f = StreamFrame::Samples { first_sample: 0, n_channels: 2, data: vec![1.0, 2.0] }.encode();
        f.push(0);
        assert!(StreamFrame::decode(&f, 2).is_err());
    }
}
