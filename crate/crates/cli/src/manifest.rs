use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Machine-readable record of one invocation. Contains no timestamps so
/// that identical reruns produce identical manifests.
#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            tool: "blens",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed: None,
            config_hash: None,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn config_hash(mut self, hash: String) -> Self {
        self.config_hash = Some(hash);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    /// Writes `<primary>.manifest.json`, or `manifest.json` inside a directory.
    pub fn write_for(&self, primary: &Path) -> Result<PathBuf> {
        let path = if primary.is_dir() {
            primary.join("manifest.json")
        } else {
            let mut name = primary.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            primary.with_file_name(name)
        };
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
