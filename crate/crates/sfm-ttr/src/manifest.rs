//! Provenance record written next to every subcommand's outputs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    /// Input path as given on the command line.
    pub root: String,
    /// File relative to `root`; empty when `root` is itself the file.
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// RFC 3339, UTC.
    pub timestamp: String,
    pub inputs: Vec<InputHash>,
    pub config: RunConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Hashes every file under the given paths (directories recursively, in
/// file-name order). Manifests of upstream stages are skipped so that a
/// rerun hashes the same set of files.
pub fn hash_inputs(paths: &[PathBuf]) -> io::Result<Vec<InputHash>> {
    let mut out = Vec::new();
    for root in paths {
        for entry in WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(io::Error::other)?;
            if !entry.file_type().is_file() || (entry.depth() > 0 && entry.file_name() == MANIFEST_FILE) {
                continue;
            }
            let bytes = fs::read(entry.path())?;
            let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
            out.push(InputHash {
                root: root.display().to_string(),
                file: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
    }
    Ok(out)
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, inputs: &[PathBuf]) -> io::Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.seed,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            inputs: hash_inputs(inputs)?,
            config: config.clone(),
        })
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(dir.join(MANIFEST_FILE), json + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn directories_hash_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), b"2").unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a").join("z.txt"), b"1").unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), b"{}").unwrap();
        let h = hash_inputs(&[dir.path().to_path_buf()]).unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!((h[0].file.as_str(), h[1].file.as_str()), ("a/z.txt", "b.txt"));
        assert_eq!(h[1].sha256, sha256_hex(b"2"));
        let single = hash_inputs(&[dir.path().join("b.txt")]).unwrap();
        assert_eq!(single[0].file, "");
    }

    #[test]
    fn manifest_records_config_and_seed() {
        let cfg = RunConfig { seed: 42, ..RunConfig::default() };
        let m = Manifest::new("align", &cfg, &[]).unwrap();
        let json: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(json["seed"], 42);
        assert_eq!(json["config"]["align"]["tau"], 0.5);
        assert!(!m.version.is_empty());
    }
}
