//! File-level plumbing shared by the command-line workflow: directory scans,
//! token files and their sidecars.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{
    build_manifest, read_checkpoint_file, write_checkpoint_file, CheckpointError, CollectionManifest,
};
use crate::tokenizer::{sequence_from_container, sequence_to_container, tokenize_model, TokenSequence, TokenizerError};

pub const CHECKPOINT_EXT: &str = "safetensors";
const TOKEN_SUFFIX: &str = ".tokens.safetensors";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no {1} files in {0}")]
    NothingFound(String, &'static str),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io(path.display().to_string(), e)
}

/// Checkpoint files directly inside `dir`, sorted, token files excluded.
pub fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if path.is_file() && path.extension().is_some_and(|e| e == CHECKPOINT_EXT) && !name.ends_with(TOKEN_SUFFIX) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn collect_dir(dir: &Path) -> Result<CollectionManifest, PipelineError> {
    let files = checkpoint_files(dir)?;
    if files.is_empty() {
        return Err(PipelineError::NothingFound(dir.display().to_string(), "checkpoint"));
    }
    Ok(build_manifest(&files)?)
}

/// Replaces characters that are unsafe in file names.
pub fn file_stem_for(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

/// Tokenize every manifest entry into `{id}.tokens.safetensors` plus a
/// `{id}.tokens.json` layout sidecar.
pub fn write_token_files(
    manifest: &CollectionManifest,
    d_t: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    manifest
        .entries
        .iter()
        .map(|entry| {
            let mut map = read_checkpoint_file(&entry.path)?;
            map.set_source_id(entry.source_id.clone());
            let seq = tokenize_model(&map, d_t)?;
            let (container, sidecar) = sequence_to_container(&seq)?;
            let stem = file_stem_for(&entry.source_id);
            let path = out_dir.join(format!("{stem}{TOKEN_SUFFIX}"));
            write_checkpoint_file(&path, &container)?;
            let side = out_dir.join(format!("{stem}.tokens.json"));
            std::fs::write(&side, sidecar).map_err(io(&side))?;
            Ok(path)
        })
        .collect()
}

/// Every token file in `dir`, in sorted path order.
pub fn read_token_files(dir: &Path) -> Result<Vec<TokenSequence>, PipelineError> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        if path.file_name().is_some_and(|n| n.to_string_lossy().ends_with(TOKEN_SUFFIX)) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(PipelineError::NothingFound(dir.display().to_string(), "token"));
    }
    paths.sort();
    paths
        .iter()
        .map(|path| {
            let map = read_checkpoint_file(path)?;
            let side = path.with_extension("json");
            let text = std::fs::read_to_string(&side).map_err(io(&side))?;
            Ok(sequence_from_container(&map, &text)?)
        })
        .collect()
}
