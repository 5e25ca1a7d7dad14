use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{checkpoint_paths, write_atomic};
use crate::error::{GrappaError, Result};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| GrappaError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of a checkpoint stem (manifest plus payload) or a plain file.
fn artifact_hash(path: &Path) -> Result<String> {
    if path.exists() && path.is_file() {
        return sha256_file(path);
    }
    let (manifest, payload) = checkpoint_paths(path);
    let mut h = Sha256::new();
    for p in [manifest, payload] {
        h.update(std::fs::read(&p).map_err(|e| GrappaError::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub step: String,
    pub sha256: String,
    pub config_hash: String,
    pub seed: u64,
    /// `(path, sha256)` of the artifacts this one was built from.
    pub inputs: Vec<(PathBuf, String)>,
    pub created_unix: u64,
}

/// Every artifact in a run directory with its provenance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifacts: Vec<ArtifactRecord>,
}

fn relative(root: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(root).unwrap_or(path).to_path_buf()
}

impl RunManifest {
    pub fn load_or_new(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let bytes = std::fs::read(path).map_err(|e| GrappaError::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }

    pub fn find(&self, root: &Path, artifact: &Path) -> Option<&ArtifactRecord> {
        let rel = relative(root, artifact);
        self.artifacts.iter().find(|a| a.path == rel)
    }

    /// Adds or replaces the record for `artifact`.
    pub fn record(
        &mut self,
        root: &Path,
        step: &str,
        artifact: &Path,
        inputs: &[&Path],
        config_hash: &str,
        seed: u64,
    ) -> Result<()> {
        let rel = relative(root, artifact);
        let inputs = inputs
            .iter()
            .map(|p| Ok((relative(root, p), artifact_hash(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let record = ArtifactRecord {
            path: rel.clone(),
            step: step.to_string(),
            sha256: artifact_hash(artifact)?,
            config_hash: config_hash.to_string(),
            seed,
            inputs,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(record);
        Ok(())
    }
}
