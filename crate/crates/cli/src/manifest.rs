use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use magcl::config::TrainConfig;

pub const DATASET_FILES: [&str; 4] = ["edges.tsv", "features.csv", "labels.txt", "splits.json"];

/// Written into every output directory before any training starts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: TrainConfig,
    pub dataset: DatasetRef,
    pub row_normalize: bool,
    pub seeds: Vec<u64>,
    pub outputs: Vec<StageOutputs>,
}

#[derive(Debug, Serialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct StageOutputs {
    pub label: String,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub embeddings: PathBuf,
    pub log: PathBuf,
}

pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// SHA-256 over the dataset files, each prefixed by its name and length.
pub fn fingerprint(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in DATASET_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
