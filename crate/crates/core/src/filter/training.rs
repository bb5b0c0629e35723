//! Training-data generation for the two filter levels.
//!
//! Chunk-level examples are labelled by a model through the chunk filter
//! prompt. Sentence-level targets are the chunk's sentences that pass a
//! measure: STRINC (the gold answer appears in the sentence) or CXMI (the
//! sentence raises the log-probability of the gold answer by at least a
//! threshold, in nats).

use serde::{Deserialize, Serialize};

use super::{parse_verdict, Verdict};
use crate::llm::{LanguageModel, LlmError};
use crate::model::{Chunk, Query};
use crate::prompt::TemplateName;
use crate::reply::outside_first_object;
use crate::text::{contains_run, plain_tokens, split_sentences};
use crate::Context;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Strinc,
    Cxmi,
}

impl std::str::FromStr for Measure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strinc" => Ok(Measure::Strinc),
            "cxmi" => Ok(Measure::Cxmi),
            other => Err(format!(
                "unknown measure {other:?}, expected strinc or cxmi"
            )),
        }
    }
}

/// 1 when the normalized gold answer occurs as a contiguous token run of the
/// normalized sentence. Normalization lowercases, strips ASCII punctuation
/// and collapses whitespace.
pub fn strinc_label(sentence: &str, gold_answer: &str) -> u8 {
    let gold = plain_tokens(gold_answer);
    if gold.is_empty() {
        return 0;
    }
    contains_run(&plain_tokens(sentence), &gold) as u8
}

/// Scoring prefix used for CXMI: the context, the question, then the answer
/// slot the gold answer is forced into.
pub fn cxmi_prefix(question: &str, context: &str) -> String {
    format!("Context: {context}\nQuestion: {question}\nAnswer: ")
}

/// `log p(gold | base_context + sentence) - log p(gold | base_context)`.
/// The with-sentence continuation is scored first.
pub fn cxmi_score(
    llm: &dyn LanguageModel,
    query: &Query,
    sentence: &str,
    gold_answer: &str,
    base_context: &str,
) -> Result<f64, LlmError> {
    let extended = if base_context.is_empty() {
        sentence.to_string()
    } else {
        format!("{base_context} {sentence}")
    };
    let with = llm.score_continuation(&cxmi_prefix(&query.text, &extended), gold_answer)?;
    let without = llm.score_continuation(&cxmi_prefix(&query.text, base_context), gold_answer)?;
    Ok(with - without)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub query: Query,
    pub chunks: Vec<Chunk>,
    pub gold_answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    ChunkNli,
    SentenceFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceMeta {
    pub text: String,
    pub strinc: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cxmi: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub passage_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sentences: Vec<SentenceMeta>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub low_signal: bool,
}

/// One JSON line of the training file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub kind: ExampleKind,
    pub query: String,
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub meta: ExampleMeta,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingReport {
    pub examples: Vec<TrainingExample>,
    pub failures: Vec<String>,
}

impl TrainingReport {
    pub fn count(&self, kind: ExampleKind) -> usize {
        self.examples.iter().filter(|e| e.kind == kind).count()
    }

    pub fn label_count(&self, label: Verdict) -> usize {
        self.examples
            .iter()
            .filter(|e| e.label == Some(label))
            .count()
    }

    pub fn low_signal(&self) -> usize {
        self.examples.iter().filter(|e| e.meta.low_signal).count()
    }

    pub fn to_jsonl(&self) -> String {
        self.examples
            .iter()
            .map(|e| serde_json::to_string(e).expect("example serializes") + "\n")
            .collect()
    }
}

/// Emits one chunk-level and one sentence-level example per retrieved chunk.
/// Failed examples are skipped and listed in the report.
pub fn build_training_set(
    ctx: &Context<'_>,
    items: &[TrainingItem],
    measure: Measure,
    threshold: f64,
) -> TrainingReport {
    let mut report = TrainingReport::default();
    for item in items {
        let question = item.query.text.as_str();
        for chunk in &item.chunks {
            let id = &chunk.passage_id;
            match ctx.ask(
                TemplateName::ChunkFilter,
                &[("External_Knowledge", &chunk.text), ("Question", question)],
            ) {
                Ok(raw) => match parse_verdict(&raw) {
                    Some(label) => {
                        let explanation = outside_first_object(&raw);
                        report.examples.push(TrainingExample {
                            kind: ExampleKind::ChunkNli,
                            query: question.to_string(),
                            input: chunk.text.clone(),
                            label: Some(label),
                            target: None,
                            meta: ExampleMeta {
                                passage_id: id.clone(),
                                explanation: (!explanation.is_empty()).then_some(explanation),
                                ..Default::default()
                            },
                        });
                    }
                    None => report
                        .failures
                        .push(format!("{}/{id}: unparseable label {raw:?}", item.query.id)),
                },
                Err(e) => report
                    .failures
                    .push(format!("{}/{id}: labeler call failed: {e}", item.query.id)),
            }

            match sentence_example(ctx.llm, item, chunk, measure, threshold) {
                Ok(example) => report.examples.push(example),
                Err(e) => report
                    .failures
                    .push(format!("{}/{id}: scoring failed: {e}", item.query.id)),
            }
        }
    }
    report
}

fn sentence_example(
    llm: &dyn LanguageModel,
    item: &TrainingItem,
    chunk: &Chunk,
    measure: Measure,
    threshold: f64,
) -> Result<TrainingExample, LlmError> {
    let mut sentences = Vec::new();
    for text in split_sentences(&chunk.text) {
        let cxmi = match measure {
            Measure::Cxmi => Some(cxmi_score(llm, &item.query, &text, &item.gold_answer, "")?),
            Measure::Strinc => None,
        };
        sentences.push(SentenceMeta {
            strinc: strinc_label(&text, &item.gold_answer),
            cxmi,
            text,
        });
    }
    let selected: Vec<&str> = sentences
        .iter()
        .filter(|s| match measure {
            Measure::Strinc => s.strinc == 1,
            Measure::Cxmi => s.cxmi.is_some_and(|c| c >= threshold),
        })
        .map(|s| s.text.as_str())
        .collect();
    let target = selected.join(" ");
    Ok(TrainingExample {
        kind: ExampleKind::SentenceFilter,
        query: item.query.text.clone(),
        input: chunk.text.clone(),
        label: None,
        meta: ExampleMeta {
            passage_id: chunk.passage_id.clone(),
            explanation: None,
            low_signal: target.is_empty(),
            sentences,
        },
        target: Some(target),
    })
}

/// Fraction of labelled sentences that pass at each threshold. For STRINC
/// the threshold is irrelevant and every entry is the STRINC pass rate.
pub fn pass_rates(
    examples: &[TrainingExample],
    measure: Measure,
    thresholds: &[f64],
) -> Vec<(f64, f64)> {
    let sentences: Vec<&SentenceMeta> = examples.iter().flat_map(|e| &e.meta.sentences).collect();
    thresholds
        .iter()
        .map(|&t| {
            let passing = sentences
                .iter()
                .filter(|s| match measure {
                    Measure::Strinc => s.strinc == 1,
                    Measure::Cxmi => s.cxmi.is_some_and(|c| c >= t),
                })
                .count();
            let rate = if sentences.is_empty() {
                0.0
            } else {
                passing as f64 / sentences.len() as f64
            };
            (t, rate)
        })
        .collect()
}
