//! Run manifest: per-stage status, content hashes of every artifact read or
//! written, and the numeric results each later stage depends on.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Artifact file name to SHA-256 of the bytes read.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Artifact file name to SHA-256 of the bytes written.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub values: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StageRecord {
    pub fn new() -> Self {
        Self {
            status: StageStatus::Failed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            values: serde_json::Value::Null,
            error: None,
        }
    }

    pub fn values_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.values.clone())?)
    }
}

impl Default for StageRecord {
    fn default() -> Self {
        Self::new()
    }
}

/// Everything needed to audit or resume a run. Wall-clock timings live in a
/// separate file so that identical runs produce identical manifests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    /// SHA-256 of the effective configuration, serialized as TOML.
    pub config_sha256: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        let bytes = std::fs::read(&path).map_err(|e| Error::Format {
            path: path.clone(),
            reason: format!("cannot read manifest: {e}"),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(Self::path(dir), text)?;
        Ok(())
    }

    /// The record of a stage that completed, or a config error naming it.
    pub fn completed(&self, stage: &str) -> Result<&StageRecord> {
        match self.stages.get(stage) {
            Some(r) if r.status == StageStatus::Done => Ok(r),
            _ => Err(Error::Config(format!(
                "stage `{stage}` has not completed in this output directory"
            ))),
        }
    }

    /// Re-hashes every output recorded for `stage` and fails on the first
    /// file that changed or disappeared.
    pub fn verify_outputs(&self, stage: &str, dir: &Path) -> Result<()> {
        for (name, digest) in &self.completed(stage)?.outputs {
            let path = dir.join(name);
            match std::fs::read(&path) {
                Ok(bytes) if sha256_hex(&bytes) == *digest => {}
                _ => return Err(Error::StaleArtifact { path }),
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}
