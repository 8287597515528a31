//! Run manifests: everything needed to regenerate a command's outputs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Outputs relative to the output directory when they lie inside it.
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub artifact_version: String,
    pub command: String,
    /// Raw command line, for reference only; replay uses `config`.
    pub argv: Vec<String>,
    /// Fully resolved command settings with absolute input paths.
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub threads: usize,
    pub wall_ms: u64,
}

/// `sha256("blob <len>\0" ++ bytes)`, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(content_hash(&bytes))
}

pub fn record(path: &Path, base: Option<&Path>) -> Result<FileRecord> {
    let shown = base
        .and_then(|b| path.strip_prefix(b).ok())
        .unwrap_or(path);
    Ok(FileRecord {
        path: shown.display().to_string(),
        hash: file_hash(path)?,
    })
}

/// Manifest location for a primary output: `<output>.manifest.json`.
pub fn path_for(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        anyhow::ensure!(
            m.manifest_version == MANIFEST_VERSION,
            "unsupported manifest version {}",
            m.manifest_version
        );
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_style_framing() {
        // sha256 of "blob 0\0".
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }

    #[test]
    fn manifest_path_sits_next_to_output() {
        assert_eq!(path_for(Path::new("out/x.csv")), PathBuf::from("out/x.csv.manifest.json"));
    }
}
