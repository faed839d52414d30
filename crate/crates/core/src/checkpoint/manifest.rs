use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::{infer_architecture, ArchInference};
use super::container::parse_checkpoint;
use super::CheckpointError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: String,
    pub path: PathBuf,
    pub arch: ArchInference,
    pub parameter_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectionManifest {
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkipRecord>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl CollectionManifest {
    /// The on-disk form: a JSON array of entries.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("manifest entries serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let entries = serde_json::from_str(s)?;
        Ok(Self { entries, skipped: Vec::new(), created_at: 0 })
    }
}

fn load_entry(path: &Path) -> Result<ManifestEntry, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let map = parse_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let filename = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let source_id = if map.source_id().is_empty() {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        map.source_id().to_string()
    };
    Ok(ManifestEntry {
        source_id,
        path: path.to_path_buf(),
        arch: infer_architecture(&map, &filename),
        parameter_count: map.parameter_count(),
    })
}

/// Parses every file (in parallel), skipping unreadable or corrupted ones.
/// Entries come back sorted by `(source_id, path)` whatever the scheduling.
pub fn build_manifest(paths: &[PathBuf]) -> Result<CollectionManifest, CheckpointError> {
    let results: Vec<Result<ManifestEntry, SkipRecord>> = paths
        .par_iter()
        .map(|p| load_entry(p).map_err(|reason| SkipRecord { path: p.clone(), reason }))
        .collect();

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(s) => {
                log::warn!("skipping {}: {}", s.path.display(), s.reason);
                skipped.push(s);
            }
        }
    }
    if entries.is_empty() {
        return Err(CheckpointError::AllInputsFailed(skipped.len()));
    }
    entries.sort_by(|a, b| (&a.source_id, &a.path).cmp(&(&b.source_id, &b.path)));
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    Ok(CollectionManifest { entries, skipped, created_at })
}
