use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RetrieverError;

/// A corpus document as read from the JSON-lines corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    #[serde(rename = "id")]
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

/// A fixed-size window of a document. `passage_id` is `<doc_id>#<ordinal>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub title: String,
    pub text: String,
}

pub const DEFAULT_WINDOW: usize = 100;

/// Reads a corpus file: one `{"id", "title", "text"}` object per line.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn ingest_corpus(path: &Path) -> Result<Vec<CorpusDoc>, RetrieverError> {
    let file = std::fs::File::open(path).map_err(|e| RetrieverError::io(path, e))?;
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| RetrieverError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: CorpusDoc = serde_json::from_str(&line).map_err(|e| RetrieverError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if doc.text.trim().is_empty() {
            return Err(RetrieverError::Parse {
                line: line_no,
                message: "document text is empty".into(),
            });
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(RetrieverError::DuplicateDocId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Greedy, non-overlapping windows of `window` words; the last one may be
/// shorter. Words are rejoined with single spaces.
pub fn chunk_document(doc: &CorpusDoc, window: usize) -> Vec<Passage> {
    assert!(window >= 1, "window must be at least one word");
    let words: Vec<&str> = doc.text.split_whitespace().collect();
    words
        .chunks(window)
        .enumerate()
        .map(|(ordinal, w)| Passage {
            passage_id: format!("{}#{}", doc.doc_id, ordinal),
            title: doc.title.clone(),
            text: w.join(" "),
        })
        .collect()
}
