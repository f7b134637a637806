use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn aid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aid")).args(args).output().expect("aid runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr:\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 16-trial session and a 1-epoch training schedule keep the runs fast.
fn write_small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{ "session": { "n_rounds": 2 }, "train": { "max_epochs": 1 }, "subject": { "n_channels": 4 } }"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&aid(&["simulate", "--seed", "7", "--snr-amplitude", "3.0", "--n-rounds", "2", "--out", p(out)]));
    }
    let ra = std::fs::read(a.join("recording.aid")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("recording.aid")).unwrap());
    assert_eq!(std::fs::read(a.join("schedule.json")).unwrap(), std::fs::read(b.join("schedule.json")).unwrap());
    let m: Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
    assert_eq!(m["seeds"]["master"], 7);
}

#[test]
fn simulate_defaults_give_480_markers() {
    let dir = tempfile::tempdir().unwrap();
    ok(&aid(&["simulate", "--out", p(dir.path())]));
    let rec = aid_core::iostream::read_recording(dir.path().join("recording.aid")).unwrap();
    assert_eq!(rec.markers.len(), 480);
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = aid(&["simulate", "--n-rounds", "0", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_rounds"));

    ok(&aid(&["simulate", "--n-rounds", "2", "--out", p(dir.path())]));
    let rec = dir.path().join("recording.aid");
    let out = aid(&["evaluate", p(&rec), "--seed", "1", "--permutations", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = aid(&["replay", p(&rec), "--model", p(&dir.path().join("missing.aiw"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = aid(&["cohort", "--subjects", "0"]);
    assert_eq!(out.status.code(), Some(2));

    // unparseable flag value
    assert_eq!(aid(&["evaluate", p(&rec), "--seed", "x"]).status.code(), Some(2));
}

#[test]
fn corrupt_recording_is_a_runtime_error_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.aid");
    std::fs::write(&bad, b"AID1\x01\x00").unwrap();
    let out = aid(&["evaluate", p(&bad), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.aid"));
}

#[test]
fn evaluate_reports_ten_folds_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let sim = dir.path().join("sim");
    ok(&aid(&["simulate", "--config", &cfg, "--seed", "3", "--snr-amplitude", "10", "--out", p(&sim)]));
    let rec = sim.join("recording.aid");
    let run = |out: &Path| {
        ok(&aid(&["evaluate", p(&rec), "--config", &cfg, "--seed", "5", "--permutations", "200", "--out", p(out)]));
        std::fs::read(out.join("report.json")).unwrap()
    };
    let (a, b) = (run(&dir.path().join("e1")), run(&dir.path().join("e2")));
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["per_fold_accuracy"].as_array().unwrap().len(), 10);
    assert_eq!(report["n_permutations"], 200);

    // stdout variant: report on stdout, manifest on stderr
    let out = aid(&["evaluate", p(&rec), "--config", &cfg, "--seed", "5", "--permutations", "200"]);
    ok(&out);
    assert_eq!(out.stdout, a);
    let manifest: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(manifest["command"], "evaluate");
}

#[test]
fn rerun_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let sim = dir.path().join("sim");
    ok(&aid(&["simulate", "--config", &cfg, "--seed", "11", "--out", p(&sim)]));
    ok(&aid(&["rerun", p(&sim.join("manifest.json")), "--out", p(&dir.path().join("again"))]));
    assert_eq!(
        std::fs::read(sim.join("recording.aid")).unwrap(),
        std::fs::read(dir.path().join("again/recording.aid")).unwrap()
    );
    let out = aid(&["rerun", p(&sim.join("manifest.json"))]);
    assert_eq!(out.status.code(), Some(2));

    // a changed input is detected
    std::fs::write(&cfg, r#"{ "session": { "n_rounds": 3 } }"#).unwrap();
    let out = aid(&["rerun", p(&sim.join("manifest.json")), "--out", p(&dir.path().join("third"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cohort_logs_distinct_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = aid(&["cohort", "--subjects", "2", "--config", &cfg, "--snr-amplitude", "5", "--folds", "2", "--permutations", "50", "--seed", "9"]);
    ok(&out);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["summary"]["n_subjects"], 2);
    assert!(doc["summary"]["significant_count"].is_u64());
    let seeds: Vec<u64> = doc["subjects"].as_array().unwrap().iter().map(|s| s["seed"].as_u64().unwrap()).collect();
    assert_ne!(seeds[0], seeds[1]);
    let log = String::from_utf8_lossy(&out.stderr);
    for s in &seeds {
        assert!(log.contains(&format!("seed {s}")), "{log}");
    }

    let one = aid(&["cohort", "--subjects", "1", "--config", &cfg, "--folds", "2", "--permutations", "10"]);
    ok(&one);
    let doc: Value = serde_json::from_slice(&one.stdout).unwrap();
    assert_eq!(doc["summary"]["n_subjects"], 1);
}

#[test]
fn train_replay_and_decode_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let sim = dir.path().join("sim");
    ok(&aid(&["simulate", "--config", &cfg, "--seed", "2", "--snr-amplitude", "8", "--out", p(&sim)]));
    let rec = sim.join("recording.aid");
    let model_dir = dir.path().join("model");
    ok(&aid(&["train", p(&rec), "--config", &cfg, "--seed", "4", "--out", p(&model_dir)]));
    let model = model_dir.join("model.aiw");

    let selections = |out: &Output| -> Vec<String> {
        let text = String::from_utf8(out.stdout.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let last: Value = serde_json::from_str(lines.last().unwrap()).unwrap();
        assert_eq!(last["summary"]["n_trials"], 16);
        lines[..lines.len() - 1].iter().map(|s| s.to_string()).collect()
    };
    let offline = aid(&["decode", p(&rec), "--model", p(&model)]);
    ok(&offline);
    let offline = selections(&offline);
    assert_eq!(offline.len(), 16);
    for chunk in ["1", "1000"] {
        let online = aid(&["replay", p(&rec), "--model", p(&model), "--chunk", chunk]);
        ok(&online);
        assert_eq!(selections(&online), offline, "chunk {chunk}");
    }
}
