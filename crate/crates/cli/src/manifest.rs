//! Run manifests: what was run, with which resolved config and inputs, and
//! what it produced.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub dataset_sha256: Option<String>,
    pub outputs: Vec<PathBuf>,
    pub status: Status,
    pub duration_seconds: Option<f64>,
    pub error: Option<String>,
}

/// A manifest on disk that is rewritten when the run finishes.
pub struct ManifestWriter {
    path: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl ManifestWriter {
    /// Writes the initial `running` manifest.
    pub fn start(
        path: PathBuf,
        command: &str,
        argv: Vec<String>,
        config: &impl Serialize,
        seed: u64,
        dataset: Option<&Path>,
    ) -> Result<Self> {
        let dataset_sha256 = dataset.map(sha256_file).transpose()?;
        let w = ManifestWriter {
            path,
            manifest: RunManifest {
                command: command.to_string(),
                argv,
                config: serde_json::to_value(config)?,
                seed,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                dataset_sha256,
                outputs: Vec::new(),
                status: Status::Running,
                duration_seconds: None,
                error: None,
            },
            started: Instant::now(),
        };
        w.write()?;
        Ok(w)
    }

    /// Checksums a dataset produced by the run.
    pub fn record_dataset(&mut self, path: &Path) -> Result<()> {
        self.manifest.dataset_sha256 = Some(sha256_file(path)?);
        Ok(())
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&self.path, text + "\n")
            .with_context(|| format!("writing manifest {}", self.path.display()))
    }

    /// Records the outcome of `result` and rewrites the manifest.
    pub fn finish<T>(mut self, outputs: Vec<PathBuf>, result: Result<T>) -> Result<T> {
        self.manifest.duration_seconds = Some(self.started.elapsed().as_secs_f64());
        match &result {
            Ok(_) => {
                self.manifest.status = Status::Complete;
                self.manifest.outputs = outputs;
            }
            Err(e) => {
                self.manifest.status = Status::Failed;
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        self.write()?;
        result
    }
}

/// `<path>.manifest.json` next to an output file.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}
