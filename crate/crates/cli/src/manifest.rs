//! Run manifests: what ran, with which inputs, producing which outputs.
//!
//! The manifest is bookkeeping for reproducibility audits; it carries wall
//! timings and is therefore the one output file that is not byte-stable
//! across reruns.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use mtsk_core::rng::fnv1a64;

#[derive(Serialize)]
pub struct FileRef {
    pub path: String,
    pub hash: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub build: String,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub timings_seconds: BTreeMap<String, f64>,
    pub effective_config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, effective_config: serde_json::Value) -> Self {
        let config_hash = format!("{:016x}", fnv1a64(effective_config.to_string().as_bytes()));
        RunManifest {
            command: command.to_string(),
            config_hash,
            seed,
            build: format!("mtsk {}", env!("CARGO_PKG_VERSION")),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_seconds: BTreeMap::new(),
            effective_config,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(file_ref(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(file_ref(path)?);
        Ok(())
    }

    pub fn record_timing(&mut self, name: &str, seconds: f64) {
        self.timings_seconds.insert(name.to_string(), seconds);
    }

    /// Write `run_manifest.json` atomically (temp file + rename).
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let target = dir.join("run_manifest.json");
        let tmp = dir.join(".run_manifest.json.tmp");
        let json = serde_json::to_string_pretty(self).context("serializing run manifest")?;
        fs::write(&tmp, json.as_bytes()).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &target).with_context(|| format!("renaming into {}", target.display()))?;
        Ok(target)
    }
}

fn file_ref(path: &Path) -> Result<FileRef> {
    Ok(FileRef {
        path: path.display().to_string(),
        hash: format!("{:016x}", hash_path(path)?),
    })
}

/// FNV fingerprint of a file, or of a directory's (name, file-hash) pairs in
/// sorted order.
pub fn hash_path(path: &Path) -> Result<u64> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::result::Result<_, _>>()?;
        entries.sort();
        let mut acc = String::new();
        for entry in entries {
            let name = entry.file_name().unwrap_or_default().to_string_lossy().to_string();
            acc.push_str(&format!("{}:{:016x};", name, hash_path(&entry)?));
        }
        Ok(fnv1a64(acc.as_bytes()))
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(fnv1a64(&bytes))
    }
}
