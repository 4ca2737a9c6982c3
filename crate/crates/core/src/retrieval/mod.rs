//! Coarse retrieval: place manifests, descriptor files, GeM pooling and
//! exhaustive top-N search.

mod descriptors;
mod place;
mod pooling;
mod search;

use std::io;
use std::path::Path;

pub use descriptors::{
    l2_norm, load_embeddings, load_embeddings_raw, normalize_in_place, parse_binary, parse_jsonl,
    DescriptorSet, EmbeddingFormat, BINARY_MAGIC, NORM_TOLERANCE,
};
pub use place::{load_manifest, parse_manifest, write_manifest, Frame, Manifest, PlaceRecord};
pub use pooling::{gem_pool, DEFAULT_GEM_P};
pub use search::{
    candidates_to_jsonl, load_candidate_lists, parse_candidate_lists, retrieve_all, retrieve_top_n, similarity,
    write_candidate_lists, Candidate, CandidateList, Metric, DEFAULT_TOP_N,
};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown frame `{0}` (expected utm|wgs84)")]
    UnknownFrame(String),
    #[error("dimension mismatch for `{id}`: got {got}, want {want}")]
    DimMismatch { id: String, got: usize, want: usize },
    #[error("corrupt descriptor file: {0}")]
    CorruptHeader(String),
    #[error("zero-norm vector `{0}`")]
    ZeroVector(String),
    #[error("empty input")]
    EmptyInput,
    #[error("GeM power must be finite and positive, got {0}")]
    NonPositiveP(f64),
}

impl RetrievalError {
    pub(crate) fn io(path: &Path, err: io::Error) -> Self {
        if err.kind() == io::ErrorKind::NotFound {
            RetrievalError::MissingFile(path.display().to_string())
        } else {
            RetrievalError::Io {
                path: path.display().to_string(),
                source: err,
            }
        }
    }
}
