use std::collections::BTreeMap;

use super::corpus::Passage;
use super::{Retriever, RetrieverError};
use crate::model::Chunk;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Lowercases and splits on every run of non-alphanumeric characters.
/// No stemming and no stopword removal.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

impl Bm25Params {
    pub fn validate(self) -> Result<Self, RetrieverError> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(RetrieverError::InvalidParameter(format!(
                "k1 must be positive, got {}",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(RetrieverError::InvalidParameter(format!(
                "b must be in [0, 1], got {}",
                self.b
            )));
        }
        Ok(self)
    }
}

/// One posting: passage ordinal and term frequency in that passage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub ordinal: u32,
    pub tf: u32,
}

/// Inverted index with Okapi BM25 ranking.
///
/// Scores use the non-negative IDF `ln((N - df + 0.5) / (df + 0.5) + 1)` and
/// the saturated term frequency `tf (k1 + 1) / (tf + k1 (1 - b + b dl / avgdl))`.
/// Repeated query terms contribute once per occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    pub(crate) params: Bm25Params,
    pub(crate) passages: Vec<Passage>,
    pub(crate) doc_lengths: Vec<u32>,
    pub(crate) postings: BTreeMap<String, Vec<Posting>>,
    pub(crate) avgdl: f64,
}

impl Bm25Index {
    pub fn build(passages: Vec<Passage>, params: Bm25Params) -> Result<Self, RetrieverError> {
        let params = params.validate()?;
        if passages.is_empty() {
            return Err(RetrieverError::EmptyCorpus);
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(passages.len());
        for (ordinal, passage) in passages.iter().enumerate() {
            let terms = tokenize(&passage.text);
            doc_lengths.push(terms.len() as u32);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for term in terms {
                *counts.entry(term).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting {
                    ordinal: ordinal as u32,
                    tf,
                });
            }
        }
        Ok(Self::from_parts(params, passages, doc_lengths, postings))
    }

    pub(crate) fn from_parts(
        params: Bm25Params,
        passages: Vec<Passage>,
        doc_lengths: Vec<u32>,
        postings: BTreeMap<String, Vec<Posting>>,
    ) -> Self {
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avgdl = total as f64 / doc_lengths.len() as f64;
        Self {
            params,
            passages,
            doc_lengths,
            postings,
            avgdl,
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// Number of indexed passages.
    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    /// Postings for `term`; empty when the term was never seen.
    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn vocabulary_len(&self) -> usize {
        self.postings.len()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.passages.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Ranked passages for `query`: score descending, passage id ascending on
    /// ties, zero-score passages omitted, at most `top_k` results.
    pub fn search(&self, query: &str, top_k: usize) -> Vec<Chunk> {
        let Bm25Params { k1, b } = self.params;
        let mut scores = vec![0.0f64; self.passages.len()];
        let mut touched = vec![false; self.passages.len()];
        for term in tokenize(query) {
            let list = self.postings(&term);
            if list.is_empty() {
                continue;
            }
            let idf = self.idf(list.len());
            for p in list {
                let ord = p.ordinal as usize;
                let tf = p.tf as f64;
                let dl = self.doc_lengths[ord] as f64;
                scores[ord] +=
                    idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / self.avgdl));
                touched[ord] = true;
            }
        }
        let mut hits: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(ord, s)| touched[ord] && s > 0.0)
            .collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then_with(|| {
                self.passages[a.0]
                    .passage_id
                    .cmp(&self.passages[b.0].passage_id)
            })
        });
        hits.truncate(top_k);
        hits.into_iter()
            .enumerate()
            .map(|(i, (ord, score))| {
                let p = &self.passages[ord];
                Chunk {
                    passage_id: p.passage_id.clone(),
                    title: p.title.clone(),
                    text: p.text.clone(),
                    rank: i + 1,
                    score,
                    step: 0,
                }
            })
            .collect()
    }
}

impl Retriever for Bm25Index {
    fn search(&self, query: &str, top_k: usize) -> Vec<Chunk> {
        Bm25Index::search(self, query, top_k)
    }
}
