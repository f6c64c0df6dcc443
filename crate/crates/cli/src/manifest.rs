//! Artifact bookkeeping: every file written for a run is hashed into `run_manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sinklab::data::sha256_hex;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const MANIFEST_SCHEMA: &str = "run-manifest-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub command: String,
    pub status: String,
    pub exit_code: i32,
    pub seed: u64,
    pub seed_source: String,
    pub code_version: String,
    pub config: Value,
    pub task: Option<Value>,
    pub wall_time_s: f64,
    pub artifacts: Vec<Artifact>,
    pub metrics: Map<String, Value>,
    pub error: Option<String>,
}

/// Writes files under one directory and remembers their hashes.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Outputs {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), artifacts: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        let entry = Artifact { path: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 };
        match self.artifacts.iter_mut().find(|a| a.path == name) {
            Some(a) => *a = entry,
            None => self.artifacts.push(entry),
        }
        Ok(())
    }

    pub fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, String> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Artifacts whose content no longer matches the manifest. Reads only.
pub fn check_artifacts(dir: &Path) -> Result<Vec<String>, String> {
    let m = read_manifest(dir)?;
    let mut bad = Vec::new();
    for a in &m.artifacts {
        match fs::read(dir.join(&a.path)) {
            Ok(bytes) if sha256_hex(&bytes) == a.sha256 => {}
            Ok(_) => bad.push(format!("{}: hash mismatch", a.path)),
            Err(e) => bad.push(format!("{}: {e}", a.path)),
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rewriting_replaces_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::create(dir.path()).unwrap();
        out.write("a.txt", b"one").unwrap();
        out.write("a.txt", b"two").unwrap();
        assert_eq!(out.artifacts().len(), 1);
        assert_eq!(out.artifacts()[0].sha256, sha256_hex(b"two"));
        assert_eq!(fs::read(dir.path().join("a.txt")).unwrap(), b"two");
    }
}
