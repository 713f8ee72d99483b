use std::path::Path;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

pub const MANIFEST_FILE: &str = "manifest.json";

/// SHA-1 of `"blob <len>\0" ++ bytes`, as `git hash-object` computes it.
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the output directory, with `/` separators.
    pub path: String,
    pub bytes: u64,
    pub sha1: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// The effective flat config; feeding it back through `--config`
    /// reproduces the run.
    pub config: serde_json::Value,
    pub outputs: Vec<OutputEntry>,
}

impl Manifest {
    /// Hashes `files` (relative to `dir`) in sorted order.
    pub fn build(command: &str, config: serde_json::Value, dir: &Path, files: &[String]) -> std::io::Result<Self> {
        let mut files = files.to_vec();
        files.sort();
        files.dedup();
        let outputs = files
            .into_iter()
            .map(|rel| {
                let bytes = std::fs::read(dir.join(&rel))?;
                Ok(OutputEntry {
                    path: rel,
                    bytes: bytes.len() as u64,
                    sha1: git_blob_sha1(&bytes),
                })
            })
            .collect::<std::io::Result<_>>()?;
        Ok(Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            outputs,
        })
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_git_hash_object() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_blob_sha1(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        // `git hash-object /dev/null`
        assert_eq!(git_blob_sha1(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }
}
