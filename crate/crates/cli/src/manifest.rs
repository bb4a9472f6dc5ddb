//! Provenance record written next to every command's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Tree hash over the input files, see [`hash_inputs`].
    pub input_hash: String,
    /// RFC 3339, UTC.
    pub timestamp: String,
}

impl RunManifest {
    pub fn write(&self, out: &Path) -> Result<PathBuf, CliError> {
        let path = out.join(format!("{}.run.json", self.command));
        let json = serde_json::to_vec_pretty(self).map_err(|e| CliError::Internal(e.to_string()))?;
        foamqc::write_atomic(&path, &json)?;
        Ok(path)
    }
}

/// Every regular file under `path` (or `path` itself).
fn files(path: &Path, acc: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            files(&e, acc)?;
        }
    } else if path.is_file() {
        acc.push(path.to_path_buf());
    }
    Ok(())
}

/// Git-style content hash: each file is hashed as `blob <len>\0<bytes>`,
/// then the sorted `(relative path, blob hash)` list is hashed again, so the
/// result depends on contents and layout, not on timestamps.
pub fn hash_inputs(inputs: &[PathBuf]) -> Result<String, CliError> {
    let mut tree = Sha256::new();
    for root in inputs {
        let mut all = Vec::new();
        files(root, &mut all).map_err(|e| CliError::User(format!("{}: {e}", root.display())))?;
        for f in all {
            let bytes = std::fs::read(&f).map_err(|e| CliError::User(format!("{}: {e}", f.display())))?;
            let mut blob = Sha256::new();
            blob.update(format!("blob {}\0", bytes.len()).as_bytes());
            blob.update(&bytes);
            let rel = f.strip_prefix(root).unwrap_or(&f);
            tree.update(rel.to_string_lossy().as_bytes());
            tree.update([0]);
            tree.update(blob.finalize());
        }
    }
    Ok(hex::encode(tree.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_content_not_mtime() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_path_buf();
        std::fs::write(d.join("a"), b"1").unwrap();
        std::fs::create_dir(d.join("sub")).unwrap();
        std::fs::write(d.join("sub/b"), b"2").unwrap();
        let h1 = hash_inputs(&[d.clone()]).unwrap();
        std::fs::write(d.join("a"), b"1").unwrap();
        assert_eq!(hash_inputs(&[d.clone()]).unwrap(), h1);
        std::fs::write(d.join("sub/b"), b"3").unwrap();
        assert_ne!(hash_inputs(&[d.clone()]).unwrap(), h1);
    }
}
