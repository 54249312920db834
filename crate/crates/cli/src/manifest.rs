//! Run manifest: per-stage artifact records with content hashes, plus the
//! resume check and the single-instance lock file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".damagemap.lock";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub inputs: Vec<ArtifactRecord>,
    pub outputs: Vec<ArtifactRecord>,
    pub completed_at: String,
}

/// Persistent record of every stage's consumed and produced files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        RunManifest { format_version: 1, config_hash, stages: BTreeMap::new() }
    }

    pub fn load_or_new(output_dir: &Path, config_hash: &str) -> Result<Self> {
        let path = output_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(RunManifest::new(config_hash.to_string()));
        }
        let file = File::open(&path).with_context(|| format!("open {}", path.display()))?;
        let manifest: RunManifest = serde_json::from_reader(BufReader::new(file))
            .with_context(|| format!("parse {}", path.display()))?;
        if manifest.config_hash != config_hash {
            // A different configuration invalidates all recorded stages.
            return Ok(RunManifest::new(config_hash.to_string()));
        }
        Ok(manifest)
    }

    pub fn save(&self, output_dir: &Path) -> Result<()> {
        let path = output_dir.join(MANIFEST_FILE);
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("write {}", path.display()))?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    /// A stage may be skipped on `--resume` iff it completed with identical
    /// input hashes and all of its outputs still match their recorded
    /// hashes.
    pub fn stage_is_current(&self, stage: &str, inputs: &[PathBuf]) -> bool {
        let Some(record) = self.stages.get(stage) else {
            return false;
        };
        let current: Result<Vec<ArtifactRecord>> = inputs.iter().map(|p| artifact_record(p)).collect();
        let Ok(current) = current else {
            return false;
        };
        if current != record.inputs {
            return false;
        }
        record.outputs.iter().all(|a| match artifact_record(Path::new(&a.path)) {
            Ok(now) => now.sha256 == a.sha256,
            Err(_) => false,
        })
    }

    pub fn record_stage(&mut self, stage: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let record = StageRecord {
            inputs: inputs.iter().map(|p| artifact_record(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| artifact_record(p)).collect::<Result<_>>()?,
            completed_at: chrono::Utc::now().to_rfc3339(),
        };
        self.stages.insert(stage.to_string(), record);
        Ok(())
    }

    /// Every path any stage read or wrote.
    pub fn all_paths(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .stages
            .values()
            .flat_map(|s| s.inputs.iter().chain(s.outputs.iter()).map(|a| a.path.clone()))
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

pub fn artifact_record(path: &Path) -> Result<ArtifactRecord> {
    Ok(ArtifactRecord { path: path.display().to_string(), sha256: sha256_file(path)? })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).with_context(|| format!("hash {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(to_hex(&hasher.finalize()))
}

pub fn sha256_str(text: &str) -> String {
    to_hex(&Sha256::digest(text.as_bytes()))
}

fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = std::fmt::Write::write_fmt(&mut s, format_args!("{b:02x}"));
    }
    s
}

/// Exclusive per-output-directory lock, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(output_dir: &Path) -> Result<RunLock> {
        std::fs::create_dir_all(output_dir)
            .with_context(|| format!("create {}", output_dir.display()))?;
        let path = output_dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "pid {}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    output_dir.display(),
                    path.display()
                )
            }
            Err(e) => Err(e).with_context(|| format!("create lock {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
