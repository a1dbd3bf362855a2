//! Run directories: every artifact is written through [`RunDir`], which records
//! its checksum in the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA: &str = "torusflow.manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub torusflow: String,
    pub torusflow_core: String,
    pub manifest_schema: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            torusflow: env!("CARGO_PKG_VERSION").into(),
            torusflow_core: env!("CARGO_PKG_VERSION").into(),
            manifest_schema: MANIFEST_SCHEMA.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    /// Effective configuration after overrides.
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
    pub started_unix: f64,
    pub wall_clock_seconds: f64,
    pub workers: usize,
    pub passed: bool,
    pub versions: Versions,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One writer per run directory.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
    started: Instant,
    started_unix: f64,
}

impl RunDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        Ok(Self { root: root.to_path_buf(), artifacts: Vec::new(), started: Instant::now(), started_unix })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<PathBuf> {
        let p = self.root.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, bytes)?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(Artifact { path: name.into(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<PathBuf> {
        self.write(name, &crate::format::to_json_bytes(value))
    }

    /// Writes the manifest; it is not listed among its own artifacts.
    pub fn finish(self, command: &str, config: serde_json::Value, seed: u64, workers: usize, passed: bool) -> std::io::Result<RunManifest> {
        let mut artifacts = self.artifacts;
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let m = RunManifest {
            schema: MANIFEST_SCHEMA.into(),
            command: command.into(),
            config,
            seed,
            artifacts,
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            workers,
            passed,
            versions: Versions::default(),
        };
        fs::write(self.root.join(MANIFEST_FILE), crate::format::to_json_bytes(&m))?;
        Ok(m)
    }
}

/// Recomputes every checksum; returns the artifacts that differ or are missing.
pub fn verify(root: &Path, m: &RunManifest) -> Vec<String> {
    m.artifacts
        .iter()
        .filter(|a| fs::read(root.join(&a.path)).map(|b| sha256_hex(&b) != a.sha256).unwrap_or(true))
        .map(|a| a.path.clone())
        .collect()
}

pub fn read_manifest(root: &Path) -> crate::format::Result<RunManifest> {
    crate::format::read_json(&root.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_and_verifies_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path()).unwrap();
        run.write("a.txt", b"hello").unwrap();
        run.write("sub/b.txt", b"x").unwrap();
        run.write("a.txt", b"hello").unwrap();
        let m = run.finish("test", serde_json::json!({"k": 1}), 3, 1, true).unwrap();
        assert_eq!(m.artifacts.len(), 2);
        assert_eq!(m.artifacts[0].sha256, "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824");
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        assert!(verify(dir.path(), &m).is_empty());
        fs::write(dir.path().join("a.txt"), b"changed").unwrap();
        assert_eq!(verify(dir.path(), &m), vec!["a.txt".to_string()]);
    }
}
