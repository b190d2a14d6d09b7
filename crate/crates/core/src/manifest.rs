//! Run manifests: what produced an artifact and from which inputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Effective configuration of the command.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub jobs: usize,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output path → SHA-256 of its contents, filled in after writing.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    /// Hash of every field above except `outputs`.
    #[serde(default)]
    pub hash: String,
    pub wall_clock_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>, jobs: usize) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seed,
            jobs,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            hash: String::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    /// Computes and stores the hash. Jobs and wall-clock time are left out
    /// since they do not change any artifact.
    pub fn seal(&mut self) -> String {
        let core = serde_json::json!({
            "tool": self.tool,
            "version": self.version,
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
        });
        self.hash = sha256_hex(core.to_string().as_bytes());
        self.hash.clone()
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
