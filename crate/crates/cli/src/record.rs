//! Run records and content hashes of files and directory trees.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// File name of a record inside an output directory.
pub const RECORD_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: PathBuf,
    /// Content hash; see [`content_hash`].
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: Vec<String>,
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    /// Parsed arguments plus the pipeline configuration in effect.
    pub config: serde_json::Value,
    pub input_hash: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<OutputEntry>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Files under `root` in path order, skipping run records.
fn tree_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if !is_record(&path) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn is_record(path: &Path) -> bool {
    path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n == RECORD_FILE || n.ends_with(".run.json"))
}

/// SHA-256 of a file's bytes, or for a directory, of every file's relative
/// path and bytes in path order. Run records are left out so that reruns
/// compare equal.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        for f in tree_files(path)? {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(std::fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
        }
    } else {
        h.update(std::fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Combined hash of several inputs in the order given.
pub fn inputs_hash(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(content_hash(p)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Where the record for an output goes: inside it for a directory,
/// `<file>.run.json` next to it otherwise.
pub fn record_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join(RECORD_FILE)
    } else {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".run.json");
        output.with_file_name(name)
    }
}

impl RunRecord {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing run record {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_ignores_records_and_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("a.txt"), "a").unwrap();
        std::fs::write(dir.path().join("sub/b.txt"), "b").unwrap();
        let h = content_hash(dir.path()).unwrap();
        std::fs::write(dir.path().join(RECORD_FILE), "{}").unwrap();
        std::fs::write(dir.path().join("x.run.json"), "{}").unwrap();
        assert_eq!(content_hash(dir.path()).unwrap(), h);
        std::fs::write(dir.path().join("sub/b.txt"), "c").unwrap();
        assert_ne!(content_hash(dir.path()).unwrap(), h);
        assert_eq!(record_path(&dir.path().join("m.ckpt")), dir.path().join("m.ckpt.run.json"));
        assert_eq!(record_path(dir.path()), dir.path().join(RECORD_FILE));
    }
}
