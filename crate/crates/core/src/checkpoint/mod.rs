//! Checkpoint ingestion: the binary container, architecture inference and
//! collection manifests.

mod arch;
mod container;
mod manifest;

pub use arch::{
    infer_architecture, ArchInference, ArchRule, Evidence, Family, Matcher, Modality, ARCH_RULES,
    MODALITY_KEYWORDS,
};
pub use container::{
    parse_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file, Dtype, TensorMap,
    TensorRecord,
};
pub use manifest::{build_manifest, CollectionManifest, ManifestEntry, SkipRecord};

/// Retrieval keyword vocabulary, one keyword per line.
pub const RETRIEVAL_KEYWORDS: &str = include_str!("../../../../config/retrieval_keywords.txt");

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("data region out of bounds or overlapping: {0}")]
    OffsetOverlap(String),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(String),
    #[error("invalid tensor record: {0}")]
    InvalidRecord(String),
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("no input file could be parsed ({0} skipped)")]
    AllInputsFailed(usize),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}
