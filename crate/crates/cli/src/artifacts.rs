//! Content hashes of everything a run wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "artifacts.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl ArtifactManifest {
    /// Hash `files` (which must lie under `root`), sorted by path.
    pub fn from_files(root: &Path, files: &[PathBuf]) -> Result<Self> {
        let mut artifacts = files
            .iter()
            .map(|f| {
                let bytes = fs::read(f).with_context(|| format!("hashing {}", f.display()))?;
                let rel = f
                    .strip_prefix(root)
                    .with_context(|| format!("{} is outside {}", f.display(), root.display()))?;
                let path = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                Ok(Artifact {
                    path,
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        artifacts.dedup();
        Ok(Self { artifacts })
    }
}

pub fn write_manifest(root: &Path, manifest: &ArtifactManifest) -> Result<PathBuf> {
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_is_sorted_and_relative() {
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("sub").join("b.txt");
        fs::create_dir_all(b.parent().unwrap()).unwrap();
        fs::write(&b, "b").unwrap();
        let a = dir.path().join("a.txt");
        fs::write(&a, "a").unwrap();
        let m = ArtifactManifest::from_files(dir.path(), &[b, a]).unwrap();
        let paths: Vec<_> = m.artifacts.iter().map(|x| x.path.as_str()).collect();
        assert_eq!(paths, ["a.txt", "sub/b.txt"]);
        assert_eq!(m.artifacts[0].bytes, 1);
    }
}
