//! Append-only run records and input hashing.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const OUT_ENV: &str = "LLFER_OUT";
pub const RUNS_FILE: &str = "runs.jsonl";

/// Output root: `$LLFER_OUT`, else `./llfer-out`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("llfer-out"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 over the bytes of every input file, in sorted path order.
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: String,
    pub status: String,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn append(&self, root: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let path = root.join(RUNS_FILE);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{}", serde_json::to_string(self)?)?;
        Ok(path)
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> =
            std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Content hash of the given files and directory trees. Paths enter the hash
/// relative to their input root so that moving a dataset keeps its hash.
pub fn hash_inputs(inputs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for root in inputs {
        let mut files = Vec::new();
        collect_files(root, &mut files).with_context(|| format!("reading {}", root.display()))?;
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(std::fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
        }
    }
    Ok(format!("{:x}", h.finalize()))
}
