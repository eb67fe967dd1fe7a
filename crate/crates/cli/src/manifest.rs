//! Run manifests: every invocation records its full configuration and the
//! content hashes of its inputs, so any output is replayable from the
//! manifest alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    /// Input path -> sha256 of file contents.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            threads: None,
            config,
            inputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading input {}", path.display()))?;
        self.inputs
            .insert(path.display().to_string(), hex_sha256(&bytes));
        Ok(())
    }

    /// Hash of the canonical manifest serialization; embedded in JSON
    /// outputs to tie them back to this run.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("manifest serializes");
        hex_sha256(canonical.as_bytes())[..16].to_string()
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let mut value = serde_json::to_value(self)?;
        value
            .as_object_mut()
            .expect("manifest is an object")
            .insert("manifest_hash".into(), self.hash().into());
        let path = out_dir.join("run_manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&value)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Attaches the manifest hash to a JSON object before writing it.
pub fn write_json_with_hash(
    path: &Path,
    mut value: serde_json::Value,
    manifest: &RunManifest,
) -> Result<()> {
    if let Some(obj) = value.as_object_mut() {
        obj.insert("manifest_hash".into(), manifest.hash().into());
    }
    std::fs::write(path, serde_json::to_string_pretty(&value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
