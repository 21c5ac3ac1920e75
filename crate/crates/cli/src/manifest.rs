//! Run manifest and the per-run-directory stage lock.
//!
//! The manifest is the run's ledger: which stages completed, when, and
//! the digest of every artifact each stage read and wrote. Stage wall
//! clocks live only here, never inside artifacts, so re-running a stage
//! with identical inputs reproduces byte-identical artifacts under the
//! mock provider.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use kcgen_core::hash::sha256_hex;
use kcgen_core::kt::write_atomic;
use kcgen_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    /// Provider identity of the first stage that talked to an LLM.
    pub provider_id: Option<String>,
    pub model_id: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Completion wall clock, seconds since the Unix epoch.
    pub completed_at_unix: u64,
    pub elapsed_ms: u64,
    /// Artifact path (relative to the run directory) → sha256 digest, for
    /// everything the stage read.
    pub inputs: BTreeMap<String, String>,
    /// Same, for everything the stage wrote.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(run_id: &str, config_digest: &str, seeds: BTreeMap<String, u64>) -> Self {
        RunManifest {
            run_id: run_id.to_string(),
            config_digest: config_digest.to_string(),
            seeds,
            provider_id: None,
            model_id: None,
            stages: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<Option<RunManifest>> {
        let path = Self::path(run_dir);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path)?;
        Ok(Some(serde_json::from_slice(&bytes)?))
    }

    /// Load the manifest, or fail telling the caller to run `ingest`.
    pub fn load_required(run_dir: &Path, stage: &str) -> Result<RunManifest> {
        Self::load(run_dir)?.ok_or_else(|| Error::Prerequisite {
            stage: stage.to_string(),
            required: "ingest".to_string(),
        })
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&Self::path(run_dir), &bytes)
    }

    /// Check that `required` completed and its artifacts are still on
    /// disk; a deleted artifact means the stage must be re-run.
    pub fn require_stage(&self, run_dir: &Path, stage: &str, required: &str) -> Result<()> {
        let record = self.stages.get(required).ok_or_else(|| Error::Prerequisite {
            stage: stage.to_string(),
            required: required.to_string(),
        })?;
        for rel in record.outputs.keys() {
            if !run_dir.join(rel).exists() {
                return Err(Error::Prerequisite {
                    stage: stage.to_string(),
                    required: required.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn record_stage(
        &mut self,
        name: &str,
        elapsed_ms: u64,
        inputs: BTreeMap<String, String>,
        outputs: BTreeMap<String, String>,
    ) {
        self.stages.insert(
            name.to_string(),
            StageRecord {
                completed_at_unix: unix_now(),
                elapsed_ms,
                inputs,
                outputs,
            },
        );
    }

    /// Distinct artifact paths across all stage outputs.
    pub fn artifact_count(&self) -> usize {
        self.stages
            .values()
            .flat_map(|s| s.outputs.keys())
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Digest a file that already exists on disk.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Digest every file under `dir`, keyed by its path relative to
/// `run_dir`.
pub fn dir_digests(run_dir: &Path, dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(current) = pending.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&current)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                pending.push(path);
            } else {
                out.insert(rel_to(run_dir, &path), file_digest(&path)?);
            }
        }
    }
    Ok(out)
}

pub fn rel_to(run_dir: &Path, path: &Path) -> String {
    path.strip_prefix(run_dir)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Exclusive lock on a run directory, released on drop. One stage at a
/// time may hold it.
#[derive(Debug)]
pub struct StageLock {
    path: PathBuf,
}

impl StageLock {
    pub fn acquire(run_dir: &Path) -> Result<StageLock> {
        fs::create_dir_all(run_dir)?;
        let path = run_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                use std::io::Write as _;
                let _ = writeln!(file, "{}", std::process::id());
                Ok(StageLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::domain(format!(
                "another stage is already running in this run directory \
                 (lock file {} exists); wait for it, or delete the file if it is stale",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
