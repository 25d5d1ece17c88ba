//! Run manifests. Each stage writes `manifests/<stage>.json` listing every
//! file it produced; a superseded manifest is appended to
//! `manifests/history.jsonl` before being replaced, so the log only grows.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::store;

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: String,
    pub config_hash: String,
    /// Checkpoint digests by component name (denoiser, codec, surrogate...).
    pub checkpoints: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub files: Vec<FileEntry>,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Collects manifest entries while a stage runs.
pub struct Recorder {
    root: PathBuf,
    manifest: RunManifest,
}

impl Recorder {
    pub fn start(root: &Path, stage: &str, config_hash: &str, seeds: Vec<u64>) -> Self {
        let started = now_ms();
        let run_id = format!("{stage}-{}", &config_hash[..config_hash.len().min(12)]);
        Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                run_id,
                stage: stage.to_string(),
                config_hash: config_hash.to_string(),
                checkpoints: BTreeMap::new(),
                seeds,
                started_unix_ms: started,
                finished_unix_ms: started,
                files: Vec::new(),
            },
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path for a relative output name.
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Registers a file that has already been written.
    pub fn add(&mut self, rel: &str) -> Result<()> {
        let (sha256, bytes) = sha256_file(&self.root.join(rel))?;
        self.manifest.files.retain(|f| f.path != rel);
        self.manifest.files.push(FileEntry { path: rel.to_string(), sha256, bytes });
        Ok(())
    }

    pub fn checkpoint(&mut self, name: &str, digest: &str) {
        self.manifest.checkpoints.insert(name.to_string(), digest.to_string());
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_unix_ms = now_ms();
        self.manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        let path = manifest_path(&self.root, &self.manifest.stage);
        if path.exists() {
            let previous = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
            let line = serde_json::to_string(&serde_json::from_str::<serde_json::Value>(&previous).map_err(|e| HarnessError::Runtime(e.to_string()))?)
                .map_err(|e| HarnessError::Runtime(e.to_string()))?;
            let hist = self.root.join(MANIFEST_DIR).join("history.jsonl");
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&hist).map_err(|e| HarnessError::io(&hist, e))?;
            writeln!(f, "{line}").map_err(|e| HarnessError::io(&hist, e))?;
        }
        store::write_json(&path, &self.manifest)?;
        Ok(self.manifest)
    }
}

pub fn manifest_path(root: &Path, stage: &str) -> PathBuf {
    root.join(MANIFEST_DIR).join(format!("{}.json", stage.replace(' ', "-")))
}

pub fn load_manifests(root: &Path) -> Result<Vec<RunManifest>> {
    let dir = root.join(MANIFEST_DIR);
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| HarnessError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    for p in paths {
        out.push(store::read_json(&p)?);
    }
    Ok(out)
}

/// Files under `root` (outside the manifest directory) that are listed in
/// zero or in several current manifests.
pub fn audit(root: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let manifests = load_manifests(root)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for m in &manifests {
        for f in &m.files {
            *counts.entry(f.path.clone()).or_default() += 1;
        }
    }
    let mut unlisted = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| HarnessError::io(&d, e))? {
            let p = e.map_err(|e| HarnessError::io(&d, e))?.path();
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            if rel == MANIFEST_DIR {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else if !counts.contains_key(&rel) {
                unlisted.push(rel);
            }
        }
    }
    unlisted.sort();
    let duplicated = counts.into_iter().filter(|(_, c)| *c > 1).map(|(p, _)| p).collect();
    Ok((unlisted, duplicated))
}
