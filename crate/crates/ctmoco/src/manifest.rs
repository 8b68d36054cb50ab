//! Run manifests: what was run, with which configuration, seeds and inputs,
//! and a digest of every file it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::formats::read_trace;
use crate::io;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// Command line without the program name.
    pub args: Vec<String>,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    /// Command-specific settings worth recording next to the config.
    #[serde(default)]
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub inputs: BTreeMap<String, Artifact>,
    /// Output file (relative to the output directory) → digest.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config: &ExperimentConfig) -> Self {
        Self {
            tool: concat!("ctmoco ", env!("CARGO_PKG_VERSION")).into(),
            command: command.into(),
            args,
            config: config.clone(),
            config_sha256: config.hash(),
            seeds: BTreeMap::new(),
            parameters: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.into(), seed);
    }

    pub fn parameter(&mut self, name: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("parameter serializes");
        self.parameters.insert(name.into(), v);
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let abs = std::fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
        let sha256 = io::sha256_file(&abs)?;
        self.inputs.insert(name.into(), Artifact { path: abs, sha256 });
        Ok(())
    }

    /// Records every file under `dir` except the manifest itself.
    pub fn collect_outputs(&mut self, dir: &Path) -> Result<()> {
        self.outputs = output_digests(dir)?;
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join(FILE_NAME), self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    /// Fails when an input file changed since the run.
    pub fn verify_inputs(&self) -> Result<()> {
        for (name, a) in &self.inputs {
            let now = io::sha256_file(&a.path)?;
            if now != a.sha256 {
                return Err(Error::format(&a.path, format!("input {name:?} changed since the recorded run")));
            }
        }
        Ok(())
    }
}

/// Digest of one output file. Optimizer traces are hashed with their wall
/// clock column zeroed, since timing is the one thing a rerun cannot repeat.
pub fn artifact_digest(path: &Path) -> Result<String> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let mut trace = read_trace(path)?;
        for rec in &mut trace {
            rec.wall_time_s = 0.0;
        }
        let canonical = serde_json::to_vec(&trace).map_err(|e| Error::format(path, e.to_string()))?;
        return Ok(io::sha256_hex(&canonical));
    }
    io::sha256_file(path)
}

pub fn output_digests(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).expect("walked from dir");
            let key = rel.to_string_lossy().replace('\\', "/");
            if key != FILE_NAME {
                out.insert(key, artifact_digest(&path)?);
            }
        }
    }
    Ok(out)
}

/// Differences between two output digest maps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputDiff {
    pub changed: Vec<String>,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
}

impl OutputDiff {
    pub fn between(expected: &BTreeMap<String, String>, actual: &BTreeMap<String, String>) -> Self {
        let mut diff = Self::default();
        for (k, v) in expected {
            match actual.get(k) {
                None => diff.missing.push(k.clone()),
                Some(a) if a != v => diff.changed.push(k.clone()),
                _ => {}
            }
        }
        diff.extra = actual.keys().filter(|k| !expected.contains_key(*k)).cloned().collect();
        diff
    }

    pub fn is_empty(&self) -> bool {
        self.changed.is_empty() && self.missing.is_empty() && self.extra.is_empty()
    }
}
