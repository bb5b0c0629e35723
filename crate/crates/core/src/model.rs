//! Domain types shared by every pipeline stage.

use serde::{Deserialize, Serialize};

/// A user question. `id` is opaque and only needs to be unique within a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    /// Builds a query, rejecting text that is empty after trimming.
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, EmptyQuery> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(EmptyQuery);
        }
        Ok(Self {
            id: id.into(),
            text,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("query text is empty")]
pub struct EmptyQuery;

/// One retrieved passage.
///
/// `rank` is 1-based within a single retrieval result and `step` is the loop
/// iteration that produced it (0 when retrieved outside the loop).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub passage_id: String,
    pub title: String,
    pub text: String,
    pub rank: usize,
    pub score: f64,
    pub step: usize,
}

/// The sentences of a chunk that survived filtering, in chunk order.
///
/// Every sentence is a verbatim substring of `source.text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredPassage {
    pub source: Chunk,
    pub sentences: Vec<String>,
}

impl FilteredPassage {
    /// Keeps the whole chunk, split into sentences.
    pub fn whole(source: Chunk) -> Self {
        let sentences = crate::text::split_sentences(&source.text);
        Self { source, sentences }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteOrigin {
    Initialized,
    Refined,
    /// A refinement that fell back to the input note text.
    Kept,
}

/// The evolving condensed knowledge state for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryNote {
    pub text: String,
    pub version: u32,
    pub origin: NoteOrigin,
}

impl MemoryNote {
    pub fn initialized(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            version: 0,
            origin: NoteOrigin::Initialized,
        }
    }

    /// A candidate replacing `self`, one version ahead.
    pub fn successor(&self, text: impl Into<String>, origin: NoteOrigin) -> Self {
        Self {
            text: text.into(),
            version: self.version + 1,
            origin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_rejects_blank_text() {
        assert_eq!(Query::new("q1", "  \n"), Err(EmptyQuery));
        assert_eq!(Query::new("q1", "who?").unwrap().text, "who?");
    }

    #[test]
    fn successor_bumps_version_by_one() {
        let note = MemoryNote::initialized("a");
        let next = note.successor("b", NoteOrigin::Refined);
        assert_eq!(next.version, 1);
        assert_eq!(next.successor("c", NoteOrigin::Refined).version, 2);
    }
}
