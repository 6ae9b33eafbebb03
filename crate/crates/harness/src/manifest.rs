//! Run manifests and per-subject sidecars.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{HarnessError, IoContext, Result};
use crate::pgm::Plane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSeeds {
    pub subject: usize,
    pub phantom_seed: u64,
    pub noise_seed: u64,
    /// Seed handed to every solver run on this subject.
    pub solver_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub cell: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub software_version: String,
    pub config_hash: String,
    pub seeds: Vec<SubjectSeeds>,
    pub files: Vec<FileEntry>,
    pub timings: Vec<Timing>,
    pub total_wall_ms: f64,
    /// The full configuration, so a manifest can be passed back as `--config`.
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            seeds: (0..config.subjects)
                .map(|s| SubjectSeeds {
                    subject: s,
                    phantom_seed: config.subject_seed(s),
                    noise_seed: config.noise_seed(s),
                    solver_seed: config.subject_seed(s),
                })
                .collect(),
            files: Vec::new(),
            timings: Vec::new(),
            total_wall_ms: 0.0,
            config: config.clone(),
        }
    }

    pub fn add_file(&mut self, out: &Path, rel: &str) -> Result<()> {
        let path = out.join(rel);
        let bytes = std::fs::read(&path).at(&path)?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string(self).map_err(|e| HarnessError::Format { path: path.to_path_buf(), msg: e.to_string() })?;
        std::fs::write(path, text).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Files whose current content no longer matches the recorded digest.
    pub fn stale_files(&self, out: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|f| match std::fs::read(out.join(&f.path)) {
                Ok(b) => hex::encode(Sha256::digest(&b)) != f.sha256,
                Err(_) => true,
            })
            .map(|f| f.path.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementMeta {
    pub plane: Plane,
    pub k: usize,
    pub sigma: f64,
    pub file: String,
    pub lr_dims: [usize; 3],
}

/// `subject.toml`, written next to each subject's volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectMeta {
    pub subject: usize,
    pub phantom_seed: u64,
    pub noise_seed: u64,
    pub hr_file: String,
    pub hr_dims: [usize; 3],
    pub measurements: Vec<MeasurementMeta>,
}

impl SubjectMeta {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string(self).map_err(|e| HarnessError::Format { path: path.to_path_buf(), msg: e.to_string() })?;
        std::fs::write(path, text).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| HarnessError::Format { path: path.to_path_buf(), msg: e.to_string() })
    }
}
