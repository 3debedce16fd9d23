use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::Failure;

/// Record of one command execution, written next to its primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// SHA-256 of each input, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub duration_secs: f64,
}

pub struct ManifestBuilder {
    command: String,
    started: Instant,
    inputs: BTreeMap<String, String>,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            started: Instant::now(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let digest = if path.is_dir() { dir_digest(path)? } else { file_digest(path)? };
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn finish(self, config: serde_json::Value, outputs: &[PathBuf], dest: &Path) -> Result<(), Failure> {
        let m = RunManifest {
            command: self.command,
            config,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let body = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(dest, body + "\n").map_err(|e| Failure::io(dest, e))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String, Failure> {
    let raw = fs::read(path).map_err(|e| Failure::io(path, e))?;
    Ok(hex(&Sha256::digest(&raw)))
}

/// Digest over the dataset files of a dataset directory, in a fixed order.
pub fn dir_digest(dir: &Path) -> Result<String, Failure> {
    let mut h = Sha256::new();
    for name in [netresil_core::dataset::META_FILE, netresil_core::dataset::SNAPSHOTS_FILE] {
        let p = dir.join(name);
        h.update(fs::read(&p).map_err(|e| Failure::io(&p, e))?);
    }
    Ok(hex(&h.finalize()))
}

pub fn text_digest(s: &str) -> String {
    hex(&Sha256::digest(s.as_bytes()))
}

/// `<path>.manifest.json`
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
