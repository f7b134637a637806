use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aid_core::epochs::extract_epochs;
use aid_core::evalstats::{evaluate, summarize_cohort, EvalReport};
use aid_core::iostream::{read_recording, write_recording};
use aid_core::nnet::{NetConfig, TrainConfig};
use aid_core::pipeline::{decode_offline, replay_decode, summarize, train_model, DecodedTrial, ModelBundle, ReplaySummary};
use aid_core::seeds::{derive_seed, Stream};
use aid_core::session::{build_schedule, SessionConfig};
use aid_core::synthgen::{calibrate_snr, default_topography, generate_recording, CalibrationOptions, Recording, SubjectModel};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::manifest::{compare_outputs, sha256_hex, Artifact, RunManifest};
use crate::{CliError, Command, CohortArgs, DecodeArgs, EvaluateArgs, ReplayArgs, SessionFlags, SimulateArgs, TrainArgs};

const STDOUT: &str = "<stdout>";

/// What a command produced, before the manifest is attached.
#[derive(Default)]
struct Run {
    config: Value,
    seeds: Value,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
    out_dir: Option<PathBuf>,
}

pub fn run(cmd: &Command) -> Result<(), CliError> {
    if let Command::Rerun(a) = cmd {
        return rerun(&a.manifest, a.out.as_deref());
    }
    execute(cmd).map(|_| ())
}

fn execute(cmd: &Command) -> Result<RunManifest, CliError> {
    let t0 = Instant::now();
    let r = match cmd {
        Command::Simulate(a) => simulate(a)?,
        Command::Evaluate(a) => evaluate_cmd(a)?,
        Command::Cohort(a) => cohort(a)?,
        Command::Train(a) => train(a)?,
        Command::Replay(a) => replay(a)?,
        Command::Decode(a) => decode(a)?,
        Command::Rerun(_) => return Err(CliError::Usage("a manifest cannot record a rerun".into())),
    };
    let manifest = RunManifest {
        command: cmd.name().into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        args: serde_json::to_value(cmd).expect("arguments serialize"),
        config: r.config,
        seeds: r.seeds,
        inputs: r.inputs,
        outputs: r.outputs,
        duration_s: t0.elapsed().as_secs_f64(),
    };
    match &r.out_dir {
        Some(dir) => {
            write_file(&dir.join("manifest.json"), manifest.to_json().as_bytes())?;
        }
        None => eprintln!("{}", serde_json::to_string(&manifest).expect("manifest serializes")),
    }
    Ok(manifest)
}

fn rerun(path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let original = RunManifest::read(path)?;
    let mut cmd: Command = serde_json::from_value(original.args.clone())
        .map_err(|e| CliError::Usage(format!("{}: unreadable arguments: {e}", path.display())))?;
    for input in &original.inputs {
        let now = Artifact::of(&input.path)?;
        if now.sha256 != input.sha256 {
            return Err(CliError::Runtime(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    let wrote_dir = original.outputs.iter().any(|a| a.path != Path::new(STDOUT));
    match (&mut cmd, out) {
        (Command::Simulate(a), Some(o)) => a.out = o.into(),
        (Command::Train(a), Some(o)) => a.out = o.into(),
        (Command::Evaluate(EvaluateArgs { out: dst, .. }), o)
        | (Command::Cohort(CohortArgs { out: dst, .. }), o)
        | (Command::Replay(ReplayArgs { out: dst, .. }), o)
        | (Command::Decode(DecodeArgs { out: dst, .. }), o)
            if o.is_some() || !wrote_dir =>
        {
            *dst = o.map(Path::to_path_buf)
        }
        _ => return Err(CliError::Usage("--out is required to rerun a command that wrote files".into())),
    }
    let manifest = execute(&cmd)?;
    let diffs = compare_outputs(&original.outputs, &manifest.outputs);
    if diffs.is_empty() {
        eprintln!("rerun: {} outputs identical to {}", manifest.outputs.len(), path.display());
        Ok(())
    } else {
        Err(CliError::Runtime(format!("rerun differs from {}: {}", path.display(), diffs.join("; "))))
    }
}

// ---- configuration -------------------------------------------------------

/// Config file contents. Every section is optional and every field inside a
/// section falls back to its default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    session: SessionConfig,
    subject: Option<Value>,
    net: NetConfig,
    train: TrainConfig,
}

#[derive(Debug, Clone, Serialize)]
struct Resolved {
    session: SessionConfig,
    subject: SubjectModel,
    net: NetConfig,
    train: TrainConfig,
}

fn load_config(path: Option<&Path>, inputs: &mut Vec<Artifact>) -> Result<Resolved, CliError> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            inputs.push(Artifact::of(p)?);
            serde_json::from_str::<FileConfig>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let subject = match file.subject {
        None => SubjectModel::default(),
        Some(mut v) => {
            // a channel count without a topography gets the default layout
            if let (Some(n), None) = (v.get("n_channels").and_then(Value::as_u64), v.get("erp_topography")) {
                v["erp_topography"] = json!(default_topography(n as usize));
            }
            serde_json::from_value(v).map_err(|e| CliError::Usage(format!("config subject: {e}")))?
        }
    };
    Ok(Resolved { session: file.session, subject, net: file.net, train: file.train })
}

fn apply_flags(cfg: &mut Resolved, f: &SessionFlags) {
    if let Some(v) = f.n_rounds {
        cfg.session.n_rounds = v;
    }
    if let Some(v) = f.trials_per_round {
        cfg.session.trials_per_round = v;
    }
    if let Some(v) = f.options_per_trial {
        cfg.session.options_per_trial = v;
    }
    if let Some(n) = f.channels {
        cfg.subject.n_channels = n;
        cfg.subject.erp_topography = default_topography(n);
    }
    if let Some(v) = f.noise_std {
        cfg.subject.noise_std_uv = v;
    }
    if let Some(v) = f.snr_amplitude {
        cfg.subject.erp_amplitude_uv = v;
    }
}

// ---- file helpers --------------------------------------------------------

fn write_file(path: &Path, bytes: &[u8]) -> Result<Artifact, CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
    Ok(Artifact { path: path.to_path_buf(), sha256: sha256_hex(bytes) })
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))
}

fn load_recording(path: &Path, inputs: &mut Vec<Artifact>) -> Result<Recording, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{}: no such recording", path.display())));
    }
    let rec = read_recording(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    inputs.push(Artifact::of(path)?);
    Ok(rec)
}

fn load_model(path: &Path, inputs: &mut Vec<Artifact>) -> Result<ModelBundle, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{}: no such model file", path.display())));
    }
    let model = ModelBundle::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    inputs.push(Artifact::of(path)?);
    Ok(model)
}

/// Writes `text` to `dir/name`, or to stdout when there is no directory.
fn emit(text: &str, dir: Option<&Path>, name: &str) -> Result<Artifact, CliError> {
    match dir {
        Some(d) => write_file(&d.join(name), text.as_bytes()),
        None => {
            print!("{text}");
            Ok(Artifact { path: STDOUT.into(), sha256: sha256_hex(text.as_bytes()) })
        }
    }
}

fn json_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("serializes");
    s.push('\n');
    s
}

// ---- commands ------------------------------------------------------------

fn simulate(a: &SimulateArgs) -> Result<Run, CliError> {
    let mut inputs = Vec::new();
    let mut cfg = load_config(a.config.as_deref(), &mut inputs)?;
    apply_flags(&mut cfg, &a.session);
    cfg.session.rng_seed = derive_seed(a.seed, Stream::Schedule, 0);
    cfg.subject.rng_seed = derive_seed(a.seed, Stream::Subject, 0);
    let schedule = build_schedule(&cfg.session)?;
    let rec = generate_recording(&schedule, &cfg.subject)?;
    make_dir(&a.out)?;
    let rec_path = a.out.join("recording.aid");
    write_recording(&rec, &rec_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let outputs = vec![Artifact::of(&rec_path)?, write_file(&a.out.join("schedule.json"), schedule.to_json().as_bytes())?];
    eprintln!(
        "simulate: {} trials, {} markers, {} samples x {} channels -> {}",
        schedule.trials.len(),
        rec.markers.len(),
        rec.n_samples,
        rec.n_channels,
        rec_path.display()
    );
    Ok(Run {
        config: json!({ "session": cfg.session, "subject": cfg.subject }),
        seeds: json!({ "master": a.seed, "schedule": cfg.session.rng_seed, "subject": cfg.subject.rng_seed }),
        inputs,
        outputs,
        out_dir: Some(a.out.clone()),
    })
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<Run, CliError> {
    let mut inputs = Vec::new();
    let cfg = load_config(a.config.as_deref(), &mut inputs)?;
    let rec = load_recording(&a.recording, &mut inputs)?;
    let set = extract_epochs(&rec).map_err(|e| CliError::Runtime(format!("{}: {e}", a.recording.display())))?;
    let report = evaluate(&set, &cfg.net, &cfg.train, a.folds, a.permutations, a.seed)?;
    eprintln!(
        "evaluate: mean accuracy {:.4} (std {:.4}), balanced {:.4}, AUC {:.4}, p = {:.3e}",
        report.mean,
        report.std,
        report.balanced_accuracy,
        report.auc,
        report.p_value.unwrap_or(f64::NAN)
    );
    if let Some(d) = &a.out {
        make_dir(d)?;
    }
    let outputs = vec![emit(&json_line(&report), a.out.as_deref(), "report.json")?];
    Ok(Run {
        config: json!({ "net": cfg.net, "train": cfg.train, "folds": a.folds, "permutations": a.permutations }),
        seeds: json!({ "master": a.seed }),
        inputs,
        outputs,
        out_dir: a.out.clone(),
    })
}

#[derive(Serialize)]
struct CohortSubject {
    index: usize,
    seed: u64,
    report: EvalReport,
}

fn cohort(a: &CohortArgs) -> Result<Run, CliError> {
    if a.subjects == 0 {
        return Err(CliError::Usage("--subjects must be >= 1".into()));
    }
    let mut inputs = Vec::new();
    let mut cfg = load_config(a.config.as_deref(), &mut inputs)?;
    apply_flags(&mut cfg, &a.session);
    cfg.session.validate()?;
    cfg.subject.validate()?;

    let mut calibration = None;
    if a.calibrated {
        let schedule = build_schedule(&SessionConfig { rng_seed: derive_seed(a.seed, Stream::Calibration, 0), ..cfg.session.clone() })?;
        let base = cfg.subject.clone().with_seed(derive_seed(a.seed, Stream::Calibration, 1));
        let opts = CalibrationOptions {
            net: cfg.net.clone(),
            train: cfg.train.clone(),
            folds: a.folds,
            seed: derive_seed(a.seed, Stream::Calibration, 2),
            ..CalibrationOptions::default()
        };
        let c = calibrate_snr(a.target_accuracy, &schedule, &base, &opts)?;
        eprintln!("cohort: calibrated amplitude {:.4} uV (accuracy {:.4})", c.amplitude_uv, c.achieved_accuracy);
        cfg.subject.erp_amplitude_uv = c.amplitude_uv;
        calibration = Some(c);
    }

    let mut subjects = Vec::with_capacity(a.subjects);
    for i in 0..a.subjects {
        let seed = derive_seed(a.seed, Stream::CohortSubject, i as u64);
        eprintln!("cohort: subject {i} seed {seed}");
        let schedule = build_schedule(&SessionConfig { rng_seed: derive_seed(seed, Stream::Schedule, 0), ..cfg.session.clone() })?;
        let subject = cfg.subject.clone().with_seed(derive_seed(seed, Stream::Subject, 0));
        let rec = generate_recording(&schedule, &subject)?;
        let set = extract_epochs(&rec)?;
        let report = evaluate(&set, &cfg.net, &cfg.train, a.folds, a.permutations, derive_seed(seed, Stream::FoldTraining, 0))
            ?;
        eprintln!("cohort: subject {i} mean {:.4} p {:.4}", report.mean, report.p_value.unwrap_or(f64::NAN));
        subjects.push(CohortSubject { index: i, seed, report });
    }
    let reports: Vec<EvalReport> = subjects.iter().map(|s| s.report.clone()).collect();
    let summary = summarize_cohort(&reports, a.alpha)?;
    eprintln!("cohort: {}/{} significant at alpha {}", summary.significant_count, summary.n_subjects, a.alpha);
    let seeds: Vec<u64> = subjects.iter().map(|s| s.seed).collect();
    let doc = json!({
        "amplitude_uV": cfg.subject.erp_amplitude_uv,
        "calibration": calibration,
        "summary": summary,
        "subjects": subjects,
    });
    if let Some(d) = &a.out {
        make_dir(d)?;
    }
    let outputs = vec![emit(&json_line(&doc), a.out.as_deref(), "cohort.json")?];
    Ok(Run {
        config: json!({
            "session": cfg.session, "subject": cfg.subject, "net": cfg.net, "train": cfg.train,
            "folds": a.folds, "permutations": a.permutations, "alpha": a.alpha,
            "calibrated": a.calibrated, "target_accuracy": a.target_accuracy,
        }),
        seeds: json!({ "master": a.seed, "subjects": seeds }),
        inputs,
        outputs,
        out_dir: a.out.clone(),
    })
}

fn train(a: &TrainArgs) -> Result<Run, CliError> {
    let mut inputs = Vec::new();
    let cfg = load_config(a.config.as_deref(), &mut inputs)?;
    let rec = load_recording(&a.recording, &mut inputs)?;
    let set = extract_epochs(&rec).map_err(|e| CliError::Runtime(format!("{}: {e}", a.recording.display())))?;
    let (model, history) = train_model(&set, &cfg.net, &cfg.train, a.seed)?;
    eprintln!("train: {} epochs, best {}", history.epochs_run, history.best_epoch);
    make_dir(&a.out)?;
    let outputs = vec![
        write_file(&a.out.join("model.aiw"), &model.to_bytes())?,
        write_file(&a.out.join("history.json"), json_line(&history).as_bytes())?,
    ];
    Ok(Run {
        config: json!({ "net": cfg.net, "train": cfg.train }),
        seeds: json!({ "master": a.seed }),
        inputs,
        outputs,
        out_dir: Some(a.out.clone()),
    })
}

fn options_per_trial(rec: &Recording) -> usize {
    rec.markers.iter().map(|m| m.option_position + 1).max().unwrap_or(0)
}

fn decode_log_line(d: &DecodedTrial) -> String {
    json_line(&d.selection)
}

fn summary_line(s: &ReplaySummary) -> String {
    json_line(&json!({ "summary": s }))
}

fn replay(a: &ReplayArgs) -> Result<Run, CliError> {
    let mut inputs = Vec::new();
    let model = load_model(&a.model, &mut inputs)?;
    let rec = load_recording(&a.recording, &mut inputs)?;
    let k = options_per_trial(&rec);
    let mut log = String::new();
    let to_stdout = a.out.is_none();
    let (_, summary) = replay_decode(&model, rec, a.chunk, k, |d| {
        let line = decode_log_line(d);
        if to_stdout {
            print!("{line}");
            let _ = std::io::stdout().flush();
        }
        log.push_str(&line);
    })?;
    let tail = summary_line(&summary);
    log.push_str(&tail);
    let artifact = match &a.out {
        Some(d) => {
            make_dir(d)?;
            write_file(&d.join("decode.jsonl"), log.as_bytes())?
        }
        None => {
            print!("{tail}");
            Artifact { path: STDOUT.into(), sha256: sha256_hex(log.as_bytes()) }
        }
    };
    Ok(Run {
        config: json!({ "chunk": a.chunk, "options_per_trial": k }),
        seeds: Value::Null,
        inputs,
        outputs: vec![artifact],
        out_dir: a.out.clone(),
    })
}

fn decode(a: &DecodeArgs) -> Result<Run, CliError> {
    let mut inputs = Vec::new();
    let model = load_model(&a.model, &mut inputs)?;
    let rec = load_recording(&a.recording, &mut inputs)?;
    let decoded = decode_offline(&model, &rec)?;
    let mut log: String = decoded.iter().map(decode_log_line).collect();
    log.push_str(&summary_line(&summarize(&decoded, rec.markers.len(), rec.n_samples)));
    if let Some(d) = &a.out {
        make_dir(d)?;
    }
    let outputs = vec![emit(&log, a.out.as_deref(), "decode.jsonl")?];
    Ok(Run { config: Value::Null, seeds: Value::Null, inputs, outputs, out_dir: a.out.clone() })
}
