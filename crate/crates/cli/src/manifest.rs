//! `manifest.json`: what a run was asked to do and what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub created_unix_s: u64,
    pub git_commit: Option<String>,
    /// SHA-256 over the command name and the config snapshot.
    pub fingerprint: String,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputEntry>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: BTreeMap<String, u64>) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(config.to_string().as_bytes());
        Self {
            tool: "gaze".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            created_unix_s: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            git_commit: git_commit(),
            fingerprint: hex::encode(h.finalize()),
            seeds,
            config,
            outputs: Vec::new(),
        }
    }

    /// Lists every file under `dir` (except the manifest) with its hash and
    /// writes `dir/manifest.json`.
    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        let mut files = Vec::new();
        collect(dir, dir, &mut files)?;
        files.sort();
        self.outputs = files
            .into_iter()
            .filter(|rel| rel.as_path() != Path::new(FILE))
            .map(|rel| {
                let bytes = std::fs::read(dir.join(&rel)).with_context(|| format!("reading {}", rel.display()))?;
                Ok(OutputEntry {
                    bytes: bytes.len() as u64,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                    path: rel,
                })
            })
            .collect::<Result<_>>()?;
        let path = dir.join(FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("below root").to_path_buf());
        }
    }
    Ok(())
}

fn git_commit() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    if !out.status.success() {
        return None;
    }
    Some(String::from_utf8(out.stdout).ok()?.trim().to_string()).filter(|s| !s.is_empty())
}
