//! Per-command output directory with a checksum manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the fully resolved config (defaults and overrides applied).
pub fn config_hash(cfg: &RunConfig) -> Result<String, CliError> {
    Ok(sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
}

/// Writes artifacts under one command directory and records each one.
pub struct OutputDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl OutputDir {
    pub fn create(root: &Path, command: &str, cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = root.join(command);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Other(format!("create {}: {e}", dir.display())))?;
        Ok(OutputDir {
            dir,
            manifest: Manifest {
                command: command.into(),
                config_sha256: config_hash(cfg)?,
                seed: cfg.seed,
                artifacts: Vec::new(),
            },
        })
    }

    /// `rel` uses `/` separators and is relative to the command directory.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::Other(format!("write {}: {e}", path.display())))?;
        self.manifest.artifacts.retain(|a| a.path != rel);
        self.manifest.artifacts.push(Artifact {
            path: rel.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn finish(self) -> Result<Manifest, CliError> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| CliError::Other(format!("write {}: {e}", path.display())))?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_lists_every_written_file() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let mut out = OutputDir::create(tmp.path(), "cmd", &cfg).unwrap();
        out.write("a.txt", b"hello").unwrap();
        out.write("sub/b.txt", b"x").unwrap();
        out.write("a.txt", b"hello again").unwrap();
        let m = out.finish().unwrap();
        assert_eq!(m.artifacts.len(), 2);
        let on_disk: Manifest =
            serde_json::from_str(&std::fs::read_to_string(tmp.path().join("cmd").join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(on_disk, m);
        for a in &m.artifacts {
            let bytes = std::fs::read(tmp.path().join("cmd").join(&a.path)).unwrap();
            assert_eq!(a.sha256, sha256_hex(&bytes));
        }
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.seed = 1;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}
