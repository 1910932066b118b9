//! Run manifests: the fully resolved configuration plus provenance (dataset
//! content hash, seed, timing) written atomically at the end of a run. A
//! manifest alone carries everything needed to reproduce its metrics.

use crate::config::RunConfig;
use crate::hash::git_blob_hash;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use tpconv_core::data::TimeMap;
use tpconv_core::error::{Error, Result};
use tpconv_core::models::Task;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub task: Task,
    pub seed: u64,
    pub threads: usize,
    pub config: RunConfig,
    pub data_path: String,
    /// git-style blob hash of the dataset file
    pub data_sha1: String,
    pub time_map: TimeMap,
    pub seq_len: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub start_unix: u64,
    pub end_unix: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// wall-clock seconds per epoch (not part of any determinism contract)
    pub epoch_seconds: Vec<f64>,
    /// final metrics on the test split, keyed by metric name
    pub test_metrics: BTreeMap<String, f64>,
    pub outputs: BTreeMap<String, String>,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(git_blob_hash(&bytes))
}

/// Serializes and renames into place so a crash never leaves a torn file.
pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::parse(format!("serializing manifest: {e}")))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
}

/// Finds manifest/checkpoint pairs under `root`: either `root` itself is a
/// run directory, or its immediate subdirectories are. Sorted by path.
pub fn discover_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    if root.join("manifest.json").is_file() {
        runs.push(root.to_path_buf());
    } else if root.is_dir() {
        for entry in std::fs::read_dir(root)? {
            let dir = entry?.path();
            if dir.join("manifest.json").is_file() {
                runs.push(dir);
            }
        }
    }
    runs.sort();
    if runs.is_empty() {
        return Err(Error::config(format!(
            "no run manifests found under {}",
            root.display()
        )));
    }
    Ok(runs)
}
