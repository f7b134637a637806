use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), sha256: sha256_hex(&bytes) })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One per command invocation. `args` is the parsed command line, which is
/// all `rerun` needs; everything else documents what happened.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub args: Value,
    /// Fully resolved configuration after defaults, config file and flags.
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub duration_s: f64,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: not a run manifest: {e}", path.display())))
    }
}

/// Output artifacts of two runs, matched by file name.
pub fn compare_outputs(expected: &[Artifact], actual: &[Artifact]) -> Vec<String> {
    let name = |a: &Artifact| a.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut diffs = Vec::new();
    for e in expected {
        match actual.iter().find(|a| name(a) == name(e)) {
            Some(a) if a.sha256 == e.sha256 => {}
            Some(a) => diffs.push(format!("{}: sha256 {} != {}", name(e), a.sha256, e.sha256)),
            None => diffs.push(format!("{}: not produced", name(e))),
        }
    }
    for a in actual {
        if !expected.iter().any(|e| name(e) == name(a)) {
            diffs.push(format!("{}: unexpected output", name(a)));
        }
    }
    diffs
}
