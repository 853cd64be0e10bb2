//! Run manifests: the resolved configuration plus content hashes of every
//! artifact, sufficient to reproduce a deterministic run bit-exactly.

use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub struct Manifest {
    /// Ordered `key = value` configuration lines.
    pub entries: Vec<(String, String)>,
    /// `(sha256, relative path)` per artifact.
    pub files: Vec<(String, String)>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut out = fs::File::create(path)?;
        writeln!(out, "# collabmap manifest v1")?;
        for (k, v) in &self.entries {
            writeln!(out, "{k} = {v}")?;
        }
        writeln!(out, "files:")?;
        for (hash, rel) in &self.files {
            writeln!(out, "{hash}  {rel}")?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read manifest {}: {e}", path.display()))?;
        let mut entries = Vec::new();
        let mut files = Vec::new();
        let mut in_files = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "files:" {
                in_files = true;
                continue;
            }
            if in_files {
                let mut parts = line.split_whitespace();
                let (Some(hash), Some(rel)) = (parts.next(), parts.next()) else {
                    return Err(format!("manifest line {}: bad file entry", i + 1));
                };
                files.push((hash.to_string(), rel.to_string()));
            } else {
                let Some((k, v)) = line.split_once('=') else {
                    return Err(format!("manifest line {}: expected `key = value`", i + 1));
                };
                entries.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        Ok(Self { entries, files })
    }

    /// Recompute every artifact hash and compare.
    pub fn verify_files(&self, root: &Path) -> Result<(), String> {
        for (expected, rel) in &self.files {
            let path = root.join(rel);
            let actual = hash_file(&path)
                .map_err(|e| format!("missing artifact {}: {e}", path.display()))?;
            if &actual != expected {
                return Err(format!("artifact {rel} does not match the manifest hash"));
            }
        }
        Ok(())
    }
}
