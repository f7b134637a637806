use aid_core::epochs::{extract_epochs, Normalization};
use aid_core::nnet::{ModelWeights, NetConfig};
use aid_core::pipeline::{decode_offline, replay_decode, selections, ModelBundle};
use aid_core::seeds::rng;
use aid_core::session::{build_schedule, window_samples, SessionConfig};
use aid_core::synthgen::{generate_recording, Recording, SubjectModel};

fn small_recording(amp: f64) -> Recording {
    let cfg = SessionConfig { n_rounds: 2, trials_per_round: 5, rng_seed: 21, ..Default::default() };
    let schedule = build_schedule(&cfg).unwrap();
    generate_recording(&schedule, &SubjectModel::default().with_amplitude(amp).with_seed(4)).unwrap()
}

/// Untrained but non-trivial model: random init plus normalization fitted on
/// the recording itself.
fn bundle_for(rec: &Recording) -> ModelBundle {
    let set = extract_epochs(rec).unwrap();
    let weights = ModelWeights::init(&NetConfig::default(), rec.n_channels, 410, &mut rng(77)).unwrap();
    let normalization = Normalization::fit(&set.epochs, rec.n_channels, 410).unwrap();
    ModelBundle { weights, normalization, fs: rec.sampling_rate_hz }
}

#[test]
fn replay_matches_offline_at_every_chunk_size() {
    let rec = small_recording(8.0);
    let model = bundle_for(&rec);
    let offline = decode_offline(&model, &rec).unwrap();
    assert_eq!(offline.len(), 10);
    for chunk in [1, 7, 64, 1000] {
        let mut seen = 0;
        let (online, summary) = replay_decode(&model, rec.clone(), chunk, 3, |_| seen += 1).unwrap();
        assert_eq!(seen, online.len());
        assert_eq!(selections(&online), selections(&offline), "chunk {chunk}");
        assert_eq!(online, offline);
        assert_eq!(summary.n_epochs, 30);
        assert_eq!(summary.n_labelled, 10);
    }
}

#[test]
fn replay_bounds_its_buffer() {
    let rec = small_recording(0.0);
    let model = bundle_for(&rec);
    let (pre, post) = window_samples(rec.sampling_rate_hz);
    for chunk in [1, 64, 500] {
        let (_, summary) = replay_decode(&model, rec.clone(), chunk, 3, |_| {}).unwrap();
        // one epoch window plus at most one chunk
        assert!(summary.max_buffered_samples <= (pre + post) as usize + chunk, "chunk {chunk}: {summary:?}");
    }
}

#[test]
fn replay_rejects_bad_arguments() {
    let rec = small_recording(0.0);
    let model = bundle_for(&rec);
    assert!(replay_decode(&model, rec.clone(), 0, 3, |_| {}).is_err());
    assert!(replay_decode(&model, rec.clone(), 16, 1, |_| {}).is_err());
    // too many options per trial: trials never complete
    assert!(replay_decode(&model, rec.clone(), 16, 4, |_| {}).is_err());
    let mut other = model.clone();
    other.fs = 250;
    assert!(decode_offline(&other, &rec).is_err());
}

#[test]
fn bundle_roundtrips_through_bytes_and_disk() {
    let rec = small_recording(3.0);
    let model = bundle_for(&rec);
    let back = ModelBundle::from_bytes(&model.to_bytes()).unwrap();
    assert_eq!(back, model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.aiw");
    model.save(&path).unwrap();
    assert_eq!(ModelBundle::load(&path).unwrap(), model);

    let bytes = model.to_bytes();
    assert!(ModelBundle::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(ModelBundle::from_bytes(b"nope").is_err());
}
