//! Artifact layout and durable writes. Everything lands under
//! <output_dir>/<config-digest>/<seed>/, files appear via write-then-rename
//! so a crash never leaves a partial artifact, and the per-seed manifest is
//! written last as the completion marker.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MATRIX_FILE: &str = "acc_matrix.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CKA_FILE: &str = "cka.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const PROBE_FILE: &str = "probe.bin";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

pub fn checkpoint_name(task: usize) -> String {
    format!("ckpt_task_{task:02}.bin")
}

/// Paths for one experiment directory, keyed by the config digest.
#[derive(Debug, Clone)]
pub struct Layout {
    pub exp_dir: PathBuf,
}

impl Layout {
    pub fn new(root: &Path, digest: &str) -> Self {
        Layout {
            exp_dir: root.join(digest),
        }
    }

    pub fn config_path(&self) -> PathBuf {
        self.exp_dir.join(CONFIG_FILE)
    }

    pub fn summary_path(&self) -> PathBuf {
        self.exp_dir.join(SUMMARY_FILE)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.exp_dir.join(seed.to_string())
    }

    /// True when any trial under this experiment already completed.
    pub fn any_manifest(&self) -> bool {
        let Ok(entries) = std::fs::read_dir(&self.exp_dir) else {
            return false;
        };
        entries
            .flatten()
            .any(|e| e.path().join(MANIFEST_FILE).is_file())
    }

    /// Seed directories holding a manifest, ascending.
    pub fn completed_seeds(&self) -> Vec<u64> {
        let Ok(entries) = std::fs::read_dir(&self.exp_dir) else {
            return Vec::new();
        };
        let mut seeds: Vec<u64> = entries
            .flatten()
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.parse().ok()))
            .filter(|s: &u64| self.seed_dir(*s).join(MANIFEST_FILE).is_file())
            .collect();
        seeds.sort_unstable();
        seeds
    }
}

/// Writes through a temporary sibling and renames into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().ok_or_else(|| {
        CliError::Runtime(format!("{}: no parent directory", path.display()))
    })?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::Runtime(format!("{}: no file name", path.display())))?;
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for byte in hash.iter() {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

/// Per-seed completion record: digest, run shape, and the hash of every
/// artifact in the directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub digest: String,
    pub seed: u64,
    pub method: String,
    pub n_tasks: usize,
    pub task_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
    pub probe_rows: usize,
    pub pretrain_accuracy: Option<f64>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}
