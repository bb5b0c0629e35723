//! Two-level content filtering of retrieved chunks.
//!
//! Level one asks the model for an NLI-style verdict on the whole chunk and
//! drops chunks judged useless. Level two asks the model to extract the
//! helpful sentences of each surviving chunk; only sentences that really
//! occur in the chunk are kept.
//!
//! Failures lean towards keeping evidence: an unparseable verdict keeps the
//! chunk whole, and so does an extraction that validates to nothing.

mod training;

use serde::{Deserialize, Serialize};

pub use training::{
    build_training_set, cxmi_prefix, cxmi_score, pass_rates, strinc_label, ExampleKind,
    ExampleMeta, Measure, SentenceMeta, TrainingExample, TrainingItem, TrainingReport,
};

use crate::model::{Chunk, FilteredPassage};
use crate::prompt::TemplateName;
use crate::text::{find_ignoring_whitespace, split_sentences};
use crate::{CallError, Context};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Useful,
    Useless,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Useful => "useful",
            Verdict::Useless => "useless",
        }
    }
}

/// A chunk-level judgment together with the reply it was parsed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub value: Verdict,
    pub raw: String,
}

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error(transparent)]
    Call(#[from] CallError),
    #[error("unparseable NLI verdict: {raw:?}")]
    Parse { raw: String },
}

/// Reads `{"NLI result": "useful" | "useless"}` from a reply.
pub fn parse_verdict(raw: &str) -> Option<Verdict> {
    let (object, _) = crate::reply::json_object(raw)?;
    match object
        .get("NLI result")?
        .as_str()?
        .trim()
        .to_ascii_lowercase()
        .as_str()
    {
        "useful" => Some(Verdict::Useful),
        "useless" => Some(Verdict::Useless),
        _ => None,
    }
}

/// Chunk-level judgment of whether `chunk` helps answer `question`.
pub fn chunk_filter(
    ctx: &Context<'_>,
    question: &str,
    chunk: &Chunk,
) -> Result<FilterVerdict, FilterError> {
    let raw = ctx.ask(
        TemplateName::ChunkFilter,
        &[("External_Knowledge", &chunk.text), ("Question", question)],
    )?;
    match parse_verdict(&raw) {
        Some(value) => Ok(FilterVerdict { value, raw }),
        None => Err(FilterError::Parse { raw }),
    }
}

/// Result of sentence-level extraction on one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    /// Validated sentences, verbatim from the chunk, in chunk order.
    pub sentences: Vec<String>,
    /// Reply lines that do not occur in the chunk.
    pub rejected: Vec<String>,
}

/// Splits a reply into candidate sentences, dropping list markers and
/// wrapping quotes.
fn candidates(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(strip_marker)
        .filter(|l| !l.is_empty())
        .flat_map(split_sentences)
        .collect()
}

fn strip_marker(line: &str) -> &str {
    let mut l = line.trim();
    for bullet in ["- ", "* ", "\u{2022} "] {
        if let Some(rest) = l.strip_prefix(bullet) {
            l = rest.trim_start();
        }
    }
    let digits = l.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &l[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            l = rest.trim_start();
        }
    }
    l.trim_matches('"')
}

/// Keeps the reply sentences that occur in `chunk_text` (ignoring whitespace
/// differences), mapped back to the chunk's own text.
pub fn validate_extraction(chunk_text: &str, reply: &str) -> Extraction {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut rejected = Vec::new();
    for candidate in candidates(reply) {
        match find_ignoring_whitespace(chunk_text, &candidate) {
            Some(span) => spans.push(span),
            None => rejected.push(candidate),
        }
    }
    spans.sort_unstable();
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (s, e) in spans {
        if kept.last().is_some_and(|&(_, last_end)| s < last_end) {
            continue;
        }
        kept.push((s, e));
    }
    Extraction {
        sentences: kept
            .into_iter()
            .map(|(s, e)| chunk_text[s..e].to_string())
            .collect(),
        rejected,
    }
}

/// Sentence-level extraction for a chunk already judged useful.
pub fn sentence_filter(
    ctx: &Context<'_>,
    question: &str,
    chunk: &Chunk,
) -> Result<Extraction, CallError> {
    let reply = ctx.ask(
        TemplateName::SentenceFilter,
        &[("query", question), ("context", &chunk.text)],
    )?;
    Ok(validate_extraction(&chunk.text, &reply))
}

/// What happened to one chunk during filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkOutcome {
    /// Useful, and the listed sentences were extracted.
    Extracted,
    /// Useful, but extraction failed or validated to nothing.
    KeptWhole,
    Dropped,
    /// The verdict could not be obtained; kept whole.
    FailedOpen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub passage_id: String,
    pub verdict: Option<Verdict>,
    pub raw: String,
    pub outcome: ChunkOutcome,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub passages: Vec<FilteredPassage>,
    pub records: Vec<ChunkRecord>,
    pub flags: Vec<String>,
}

/// Runs both filter levels over `chunks`, preserving rank order.
pub fn filter_chunks(ctx: &Context<'_>, question: &str, chunks: &[Chunk]) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for chunk in chunks {
        let id = &chunk.passage_id;
        let verdict = match chunk_filter(ctx, question, chunk) {
            Ok(v) => v,
            Err(e) => {
                let raw = match &e {
                    FilterError::Parse { raw } => raw.clone(),
                    FilterError::Call(c) => c.to_string(),
                };
                out.flags
                    .push(format!("{id}: verdict failed, kept whole: {e}"));
                out.records.push(ChunkRecord {
                    passage_id: id.clone(),
                    verdict: None,
                    raw,
                    outcome: ChunkOutcome::FailedOpen,
                });
                out.passages.push(FilteredPassage::whole(chunk.clone()));
                continue;
            }
        };
        if verdict.value == Verdict::Useless {
            out.records.push(ChunkRecord {
                passage_id: id.clone(),
                verdict: Some(Verdict::Useless),
                raw: verdict.raw,
                outcome: ChunkOutcome::Dropped,
            });
            continue;
        }
        let outcome = match sentence_filter(ctx, question, chunk) {
            Ok(extraction) => {
                for line in &extraction.rejected {
                    out.flags.push(format!(
                        "{id}: dropped extracted text not in chunk: {line:?}"
                    ));
                }
                if extraction.sentences.is_empty() {
                    out.flags
                        .push(format!("{id}: empty extraction, kept whole"));
                    out.passages.push(FilteredPassage::whole(chunk.clone()));
                    ChunkOutcome::KeptWhole
                } else {
                    out.passages.push(FilteredPassage {
                        source: chunk.clone(),
                        sentences: extraction.sentences,
                    });
                    ChunkOutcome::Extracted
                }
            }
            Err(e) => {
                out.flags
                    .push(format!("{id}: extraction failed, kept whole: {e}"));
                out.passages.push(FilteredPassage::whole(chunk.clone()));
                ChunkOutcome::KeptWhole
            }
        };
        out.records.push(ChunkRecord {
            passage_id: id.clone(),
            verdict: Some(Verdict::Useful),
            raw: verdict.raw,
            outcome,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Gateway, GenerationSettings, Matcher, MockBackend, MockEntry, MockScript};
    use crate::prompt::TemplateSet;
    use std::sync::Arc;

    fn chunk(id: &str, text: &str) -> Chunk {
        Chunk {
            passage_id: id.into(),
            title: "T".into(),
            text: text.into(),
            rank: 1,
            score: 1.0,
            step: 1,
        }
    }

    fn gateway(entries: Vec<(&str, &str)>) -> (Gateway, Arc<MockBackend>) {
        let mock = Arc::new(MockBackend::new(MockScript::sequential(
            entries
                .into_iter()
                .map(|(t, r)| MockEntry::reply(Matcher::template(t), r))
                .collect(),
        )));
        (
            Gateway::new(mock.clone(), GenerationSettings::new("m")),
            mock,
        )
    }

    #[test]
    fn parses_verdicts() {
        assert_eq!(
            parse_verdict(r#"{"NLI result":"useful"}"#),
            Some(Verdict::Useful)
        );
        assert_eq!(
            parse_verdict(r#"{"NLI result":"useless"}"#),
            Some(Verdict::Useless)
        );
        assert_eq!(parse_verdict("Sure! It is useful."), None);
        assert_eq!(
            parse_verdict(r#"Answer: {"NLI result": "useful"}"#),
            Some(Verdict::Useful)
        );
        assert_eq!(parse_verdict(r#"{"NLI result":"maybe"}"#), None);
        assert_eq!(parse_verdict(r#"{"result":"useful"}"#), None);
    }

    #[test]
    fn chunk_filter_reports_parse_failures() {
        let prompts = TemplateSet::builtin();
        let (gw, mock) = gateway(vec![("chunk_filter", "Sure! It is useful.")]);
        let ctx = Context::new(&gw, &prompts);
        let err = chunk_filter(&ctx, "q?", &chunk("a#0", "Body.")).unwrap_err();
        assert!(matches!(err, FilterError::Parse { raw } if raw == "Sure! It is useful."));
        let prompt = &mock.requests()[0].messages[0].content;
        assert!(prompt.contains("External Knowledge: Body.\nQuestion: q?"));
    }

    #[test]
    fn extraction_keeps_only_verbatim_sentences_in_chunk_order() {
        let e = validate_extraction("A. B. C.", "A. C.");
        assert_eq!(e.sentences, vec!["A.", "C."]);
        let e = validate_extraction("A. B. C.", "C.\nZ.\nA.");
        assert_eq!(e.sentences, vec!["A.", "C."]);
        assert_eq!(e.rejected, vec!["Z."]);
        let e = validate_extraction("A. B. C.", "A. B. C.");
        assert_eq!(e.sentences, vec!["A.", "B.", "C."]);
    }

    #[test]
    fn extraction_tolerates_markers_and_whitespace() {
        let text = "Paris is the capital.  It has\nmany museums. Rome is old.";
        let e = validate_extraction(text, "1. Paris is the capital.\n- \"It has many museums.\"");
        assert_eq!(
            e.sentences,
            vec!["Paris is the capital.", "It has\nmany museums."]
        );
        for s in &e.sentences {
            assert!(text.contains(s.as_str()));
        }
    }

    #[test]
    fn drops_useless_and_keeps_rank_order() {
        let prompts = TemplateSet::builtin();
        let (gw, _) = gateway(vec![
            ("chunk_filter", r#"{"NLI result":"useful"}"#),
            ("sentence_filter", "One."),
            ("chunk_filter", r#"{"NLI result":"useless"}"#),
            ("chunk_filter", r#"{"NLI result":"useful"}"#),
            ("sentence_filter", "Five."),
        ]);
        let ctx = Context::new(&gw, &prompts);
        let chunks = [
            chunk("a#0", "One. Two."),
            chunk("b#0", "Three."),
            chunk("c#0", "Four. Five."),
        ];
        let out = filter_chunks(&ctx, "q", &chunks);
        let ids: Vec<_> = out
            .passages
            .iter()
            .map(|p| p.source.passage_id.as_str())
            .collect();
        assert_eq!(ids, ["a#0", "c#0"]);
        assert_eq!(out.passages[1].sentences, vec!["Five."]);
        assert_eq!(out.records[1].outcome, ChunkOutcome::Dropped);
    }

    #[test]
    fn all_useless_yields_nothing() {
        let prompts = TemplateSet::builtin();
        let (gw, _) = gateway(vec![
            ("chunk_filter", r#"{"NLI result":"useless"}"#),
            ("chunk_filter", r#"{"NLI result":"useless"}"#),
        ]);
        let ctx = Context::new(&gw, &prompts);
        let out = filter_chunks(&ctx, "q", &[chunk("a#0", "A."), chunk("b#0", "B.")]);
        assert!(out.passages.is_empty());
    }

    #[test]
    fn verdict_parse_failure_keeps_chunk_whole() {
        let prompts = TemplateSet::builtin();
        let (gw, _) = gateway(vec![
            ("chunk_filter", "no idea"),
            ("chunk_filter", r#"{"NLI result":"useful"}"#),
            ("sentence_filter", "Nothing relevant here."),
        ]);
        let ctx = Context::new(&gw, &prompts);
        let out = filter_chunks(&ctx, "q", &[chunk("a#0", "A. B."), chunk("b#0", "C. D.")]);
        assert_eq!(out.records[0].outcome, ChunkOutcome::FailedOpen);
        assert_eq!(out.passages[0].sentences, vec!["A.", "B."]);
        // Empty validated extraction also keeps the chunk whole.
        assert_eq!(out.records[1].outcome, ChunkOutcome::KeptWhole);
        assert_eq!(out.passages[1].sentences, vec!["C.", "D."]);
        assert!(out
            .flags
            .iter()
            .any(|f| f.starts_with("a#0: verdict failed")));
    }
}
