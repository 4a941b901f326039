//! Run bookkeeping: the manifest that records what each stage produced,
//! and the per-directory receipts that make stage outputs reusable across
//! runs.
//!
//! A stage's outputs live in `out/<stage>-<hash12>/`, where the hash
//! covers everything that can change the stage's result: the relevant
//! config fields, the stage's sub-seed, and the hashes of its upstream
//! stages. A `stage.json` receipt inside the directory lists every output
//! file with its digest; a stage is skipped when its receipt verifies.
//! Receipts hold no clocks, so a stage directory is bit-identical across
//! reruns — wall-clock timestamps live only in the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use kaser_core::util::{sha256_hex, write_atomic};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECEIPT_FILE: &str = "stage.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Done,
    Failed,
}

/// One stage's entry in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    /// Directory name under the output root.
    pub dir: String,
    pub status: StageStatus,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Output file names (relative to the stage directory) and digests.
    pub outputs: BTreeMap<String, String>,
}

/// The run-level ledger, written atomically at every stage boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub versions: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    fn fresh(config_hash: &str) -> Self {
        let now = unix_now();
        let mut versions = BTreeMap::new();
        versions.insert("kaser-core".to_string(), kaser_core::VERSION.to_string());
        versions.insert("kaser-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Self {
            schema_version: 1,
            config_hash: config_hash.to_string(),
            created_unix: now,
            updated_unix: now,
            versions,
            stages: BTreeMap::new(),
        }
    }

    /// Loads the manifest under `out`, or starts a new one. A manifest
    /// from a different config keeps its stage entries — stages whose
    /// content hashes still match will be reused, the rest re-run.
    pub fn load_or_create(out: &Path, config_hash: &str) -> Result<Self, CliError> {
        let path = out.join(MANIFEST_FILE);
        if !path.is_file() {
            return Ok(Self::fresh(config_hash));
        }
        let bytes = std::fs::read(&path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let mut manifest: RunManifest =
            serde_json::from_slice(&bytes).map_err(|source| CliError::ConfigFormat {
                path,
                source,
            })?;
        manifest.config_hash = config_hash.to_string();
        Ok(manifest)
    }

    pub fn save(&mut self, out: &Path) -> Result<(), CliError> {
        self.updated_unix = unix_now();
        let path = out.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(|source| CliError::Io { path, source })
    }
}

/// A stage directory's self-description. Deliberately clock-free: two runs
/// that produce the same bytes produce the same receipt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReceipt {
    pub schema_version: u32,
    pub stage: String,
    pub hash: String,
    pub outputs: BTreeMap<String, String>,
}

impl StageReceipt {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(RECEIPT_FILE)
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = Self::path(dir);
        let mut bytes = serde_json::to_vec_pretty(self).expect("receipt serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(|source| CliError::Io { path, source })
    }

    pub fn read(dir: &Path) -> Result<Option<Self>, CliError> {
        let path = Self::path(dir);
        if !path.is_file() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        match serde_json::from_slice(&bytes) {
            Ok(receipt) => Ok(Some(receipt)),
            // An unreadable receipt means the stage directory is suspect;
            // treat it as absent so the stage re-runs.
            Err(_) => Ok(None),
        }
    }

    /// True when every listed output still exists with its recorded
    /// digest. A missing or altered file fails verification, which forces
    /// the stage (and everything downstream) to re-execute.
    pub fn verify(&self, dir: &Path, stage: &str, hash: &str) -> Result<bool, CliError> {
        if self.stage != stage || self.hash != hash {
            return Ok(false);
        }
        if self.outputs.is_empty() {
            return Ok(false);
        }
        for (name, digest) in &self.outputs {
            let path = dir.join(name);
            if !path.is_file() {
                return Ok(false);
            }
            if &hash_file(&path)? != digest {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

/// Hashes a set of named outputs inside `dir`.
pub fn hash_outputs(dir: &Path, names: &[String]) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for name in names {
        map.insert(name.clone(), hash_file(&dir.join(name))?);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_receipt_verifies_only_while_its_outputs_are_intact() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), b"alpha").unwrap();
        let outputs = hash_outputs(dir.path(), &["a.txt".to_string()]).unwrap();
        let receipt = StageReceipt {
            schema_version: 1,
            stage: "annotate".to_string(),
            hash: "h1".to_string(),
            outputs,
        };
        receipt.write(dir.path()).unwrap();
        let read = StageReceipt::read(dir.path()).unwrap().unwrap();
        assert!(read.verify(dir.path(), "annotate", "h1").unwrap());
        assert!(!read.verify(dir.path(), "annotate", "h2").unwrap());
        assert!(!read.verify(dir.path(), "cluster", "h1").unwrap());

        std::fs::write(dir.path().join("a.txt"), b"tampered").unwrap();
        assert!(!read.verify(dir.path(), "annotate", "h1").unwrap());

        std::fs::remove_file(dir.path().join("a.txt")).unwrap();
        assert!(!read.verify(dir.path(), "annotate", "h1").unwrap());
    }

    #[test]
    fn a_garbled_receipt_reads_as_absent() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(StageReceipt::path(dir.path()), b"{not json").unwrap();
        assert!(StageReceipt::read(dir.path()).unwrap().is_none());
    }

    #[test]
    fn the_manifest_round_trips_and_keeps_prior_stages() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = RunManifest::load_or_create(dir.path(), "cfg1").unwrap();
        manifest.stages.insert(
            "annotate".to_string(),
            StageRecord {
                hash: "h1".to_string(),
                dir: "annotate-h1".to_string(),
                status: StageStatus::Done,
                started_unix: 1,
                finished_unix: 2,
                outputs: BTreeMap::new(),
            },
        );
        manifest.save(dir.path()).unwrap();

        let reloaded = RunManifest::load_or_create(dir.path(), "cfg2").unwrap();
        assert_eq!(reloaded.config_hash, "cfg2");
        assert!(reloaded.stages.contains_key("annotate"));
        assert_eq!(reloaded.stages["annotate"].hash, "h1");
    }
}
