//! Run directories and their provenance records. Every subcommand
//! writes into a fresh directory named by timestamp and seed; the
//! manifest inside is written before any long work starts and never
//! touched again. Completion is recorded in a separate file so the
//! manifest stays immutable.

use crate::config::Config;
use crate::CliError;
use ibn_core::data::SeriesSet;
use ibn_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Fully resolved configuration (file, overrides, and environment
    /// already applied). Re-running with it reproduces the run.
    pub config: Config,
    pub seed: u64,
    /// Content hash of the prepared series and static adjacency.
    pub dataset_fingerprint: String,
    pub code_version: String,
    pub started_at: String,
    /// Always null in manifest.json; the end timestamp lives in
    /// run_complete.json so the manifest never mutates.
    pub ended_at: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct RunComplete {
    pub ended_at: String,
}

pub fn code_version() -> String {
    format!("ibn {}", env!("CARGO_PKG_VERSION"))
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

/// SHA-256 over variable ids, series values, and the static adjacency,
/// in storage order. Bit-level: any change to the prepared data changes
/// the digest.
pub fn dataset_fingerprint(series: &SeriesSet, a_pre: &Tensor) -> String {
    let mut hasher = Sha256::new();
    for id in &series.ids {
        hasher.update(id.as_bytes());
        hasher.update([0u8]);
    }
    for v in series.values.data() {
        hasher.update(v.to_le_bytes());
    }
    for v in a_pre.data() {
        hasher.update(v.to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

/// Create `<root>/<timestamp>-seed<seed>`, appending -2, -3, ... if two
/// runs land in the same second.
pub fn create_run_dir(root: &Path, seed: u64) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(root)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", root.display())))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let base = format!("{stamp}-seed{seed}");
    for attempt in 1..1000 {
        let name = if attempt == 1 {
            base.clone()
        } else {
            format!("{base}-{attempt}")
        };
        let dir = root.join(&name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => {
                return Err(CliError::Runtime(format!(
                    "cannot create {}: {e}",
                    dir.display()
                )))
            }
        }
    }
    Err(CliError::Runtime(format!(
        "cannot find a free run directory name under {}",
        root.display()
    )))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    write_json(&dir.join("manifest.json"), manifest)
}

pub fn write_complete(dir: &Path) -> Result<(), CliError> {
    write_json(
        &dir.join("run_complete.json"),
        &RunComplete {
            ended_at: now_rfc3339(),
        },
    )
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, CliError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{} is not a valid manifest: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn same_seed_directories_get_distinct_names() {
        let root = tempdir().unwrap();
        let a = create_run_dir(root.path(), 7).unwrap();
        let b = create_run_dir(root.path(), 7).unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
    }

    #[test]
    fn fingerprint_tracks_content_not_identity() {
        let series = SeriesSet {
            values: Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            ids: vec!["a".to_string(), "b".to_string()],
            coords: None,
        };
        let adj = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let f1 = dataset_fingerprint(&series, &adj);
        let f2 = dataset_fingerprint(&series.clone(), &adj.clone());
        assert_eq!(f1, f2);
        let mut other = series.clone();
        other.values.data_mut()[0] += 1.0;
        assert_ne!(f1, dataset_fingerprint(&other, &adj));
        let mut renamed = series;
        renamed.ids[0] = "c".to_string();
        assert_ne!(f1, dataset_fingerprint(&renamed, &adj));
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempdir().unwrap();
        let manifest = RunManifest {
            config: Config::default(),
            seed: 9,
            dataset_fingerprint: "abc".to_string(),
            code_version: code_version(),
            started_at: now_rfc3339(),
            ended_at: None,
        };
        write_manifest(dir.path(), &manifest).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.dataset_fingerprint, "abc");
        assert!(back.ended_at.is_none());
    }
}
