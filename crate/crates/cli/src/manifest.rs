//! Per-command manifests and atomic output writing.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

/// Outputs of one command, staged in memory so nothing is written until
/// every input has been validated.
#[derive(Debug)]
pub struct Staged {
    command: &'static str,
    run_dir: PathBuf,
    seed: u64,
    config: Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
    summary: serde_json::Map<String, Value>,
}

impl Staged {
    pub fn new(command: &'static str, run_dir: &Path, seed: u64, config: impl Serialize) -> Self {
        Staged {
            command,
            run_dir: run_dir.to_path_buf(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Map::new(),
        }
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.run_dir).unwrap_or(path).display().to_string()
    }

    /// Reads an input file and records its digest.
    pub fn input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = read(path)?;
        self.input_bytes(path, &bytes);
        Ok(bytes)
    }

    /// Records the digest of input content obtained elsewhere.
    pub fn input_bytes(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileDigest {
            path: self.rel(path),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn output(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.outputs.push((path, bytes));
    }

    pub fn summary(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.into(), serde_json::to_value(value).expect("summary serializes"));
    }

    /// Writes every staged output, then the manifest at `manifest_path`.
    /// The manifest's `digest` covers everything except `created_at`.
    pub fn commit(self, manifest_path: &Path) -> Result<Value, CliError> {
        let outputs: Vec<FileDigest> = self
            .outputs
            .iter()
            .map(|(p, b)| FileDigest {
                path: self.rel(p),
                sha256: sha256_hex(b),
            })
            .collect();
        for (p, b) in &self.outputs {
            write_atomic(p, b)?;
        }
        let mut m = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": outputs,
            "summary": self.summary,
        });
        let digest = sha256_hex(&serde_json::to_vec(&m).expect("json"));
        m["digest"] = json!(digest);
        m["created_at"] = json!(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
        let mut text = serde_json::to_vec_pretty(&m).expect("json");
        text.push(b'\n');
        write_atomic(manifest_path, &text)?;
        Ok(m)
    }
}
