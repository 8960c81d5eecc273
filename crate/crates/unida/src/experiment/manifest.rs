//! Run manifests: a JSON record of everything an experiment run produced,
//! with content hashes, stage timings and the headline metrics, so a run
//! directory is self-describing and reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentConfig;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    /// Path relative to the run directory.
    pub path: String,
    /// Hex SHA-256 of the file contents; "self" for the manifest itself.
    pub sha256: String,
}

/// Headline numbers of a finished (or aborted) run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: String,
    pub source_train_accuracy: Option<f64>,
    pub sdg_best_recovery: Option<f64>,
    pub avg_all: Option<f64>,
    pub avg_shared: Option<f64>,
    pub unknown_accuracy: Option<f64>,
    pub jaccard: Option<f64>,
    pub jaccard_reference: Option<f64>,
    pub threshold: Option<f64>,
    /// Per-run `avg_all` values when this manifest aggregates repeats.
    pub per_run_avg_all: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub input_hashes: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
    pub stage_seconds: BTreeMap<String, f64>,
    pub summary: RunSummary,
}

impl RunManifest {
    pub fn new(config: ExperimentConfig, seed: u64) -> Self {
        RunManifest {
            config,
            seed,
            input_hashes: BTreeMap::new(),
            artifacts: Vec::new(),
            stage_seconds: BTreeMap::new(),
            summary: RunSummary { status: "running".into(), ..Default::default() },
        }
    }

    /// Register a freshly written file, hashing its contents.
    pub fn add_artifact(&mut self, run_dir: &Path, name: &str, path: &Path) -> std::io::Result<()> {
        let bytes = fs::read(path)?;
        let rel = path
            .strip_prefix(run_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        self.artifacts.push(Artifact {
            name: name.to_string(),
            path: rel,
            sha256: hex_digest(&bytes),
        });
        Ok(())
    }

    pub fn artifact_path<'a>(&'a self, name: &str) -> Option<&'a str> {
        self.artifacts
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.path.as_str())
    }

    /// Write the manifest into the run directory (listing itself).
    pub fn write(&mut self, run_dir: &Path) -> std::io::Result<PathBuf> {
        self.artifacts.retain(|a| a.path != MANIFEST_NAME);
        self.artifacts.push(Artifact {
            name: "manifest".into(),
            path: MANIFEST_NAME.into(),
            sha256: "self".into(),
        });
        let path = run_dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json)?;
        Ok(path)
    }

    pub fn load(run_dir: &Path) -> std::io::Result<Self> {
        let bytes = fs::read(run_dir.join(MANIFEST_NAME))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Every file under the run directory must be listed.
    pub fn verify_complete(&self, run_dir: &Path) -> Result<(), String> {
        let mut listed: Vec<&str> = self.artifacts.iter().map(|a| a.path.as_str()).collect();
        listed.sort_unstable();
        let mut missing = Vec::new();
        visit_files(run_dir, run_dir, &mut |rel| {
            if listed.binary_search(&rel.as_str()).is_err() {
                missing.push(rel);
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(format!("files not referenced by the manifest: {missing:?}"))
        }
    }
}

fn visit_files(root: &Path, dir: &Path, f: &mut impl FnMut(String)) {
    if let Ok(entries) = fs::read_dir(dir) {
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                visit_files(root, &path, f);
            } else if let Ok(rel) = path.strip_prefix(root) {
                f(rel.to_string_lossy().into_owned());
            }
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
