//! Run provenance: every subcommand records each artifact it wrote (path,
//! size, content hash) plus the resolved-config hash into `run.json`.

use std::path::{Path, PathBuf};

use edmcast_core::rng::sha256_hex;
use serde::Serialize;

use crate::Failure;

#[derive(Serialize)]
struct OutputRecord {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
pub struct RunLog {
    command: String,
    config_hash: String,
    outputs: Vec<OutputRecord>,
}

impl RunLog {
    pub fn new(command: &str, config_hash: &str) -> RunLog {
        RunLog { command: command.to_string(), config_hash: config_hash.to_string(), outputs: Vec::new() }
    }

    /// Record an already-written file; hashing reads it back in full.
    pub fn add(&mut self, path: &Path) -> Result<(), Failure> {
        let bytes = std::fs::read(path)
            .map_err(|e| Failure::internal(format!("hash {}: {e}", path.display())))?;
        self.outputs.push(OutputRecord {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Write `run.json` and return its path (the log does not list itself).
    pub fn save(&self, out_dir: &Path) -> Result<PathBuf, Failure> {
        let path = out_dir.join("run.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Failure::internal(format!("serialize run log: {e}")))?;
        std::fs::write(&path, text)
            .map_err(|e| Failure::internal(format!("write {}: {e}", path.display())))?;
        Ok(path)
    }
}
