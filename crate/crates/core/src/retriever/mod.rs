//! Corpus ingestion, passage chunking and BM25 retrieval.

mod bm25;
mod corpus;
mod store;

use std::path::Path;

pub use bm25::{tokenize, Bm25Index, Bm25Params, Posting, DEFAULT_B, DEFAULT_K1};
pub use corpus::{chunk_document, ingest_corpus, CorpusDoc, Passage, DEFAULT_WINDOW};
pub use store::{load_index, read_index, save_index, write_index, FORMAT_VERSION, MAGIC};

use crate::model::Chunk;

/// Anything that can return ranked chunks for a query string.
pub trait Retriever: Sync {
    fn search(&self, query: &str, top_k: usize) -> Vec<Chunk>;
}

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum RetrieverError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
    #[error("cannot build an index from an empty corpus")]
    EmptyCorpus,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("index file: {0}")]
    Format(String),
}

impl RetrieverError {
    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        RetrieverError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

/// Ingests, chunks and indexes a corpus file in one go.
pub fn index_corpus(
    path: &Path,
    window: usize,
    params: Bm25Params,
) -> Result<Bm25Index, RetrieverError> {
    if window == 0 {
        return Err(RetrieverError::InvalidParameter(
            "window must be at least 1".into(),
        ));
    }
    let docs = ingest_corpus(path)?;
    let passages = docs
        .iter()
        .flat_map(|d| chunk_document(d, window))
        .collect();
    Bm25Index::build(passages, params)
}
