//! The per-question collection loop and answer generation.
//!
//! Step 1 retrieves for the original question, filters, writes the initial
//! note and asks whether it suffices. Each later step rewrites the question,
//! retrieves and filters again, runs the memory agents on the best note and
//! keeps the candidate only if the comparison prefers it. The answer is
//! generated from the best note alone.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::{compare_notes, update_memory, AgentTranscript};
use crate::filter::{filter_chunks, ChunkRecord};
use crate::llm::Metered;
use crate::model::{Answer, Chunk, FilteredPassage, MemoryNote, Query};
use crate::prompt::{join_refs, TemplateName};
use crate::reply::json_object;
use crate::retriever::{Retriever, DEFAULT_TOP_K};
use crate::text::collapse_whitespace;
use crate::{CallError, Context};

pub const DEFAULT_MAX_ITER: usize = 3;
pub const TRACE_VERSION: u32 = 1;
pub const REWRITE_MARKER: &str = "### New Question";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub max_iter: usize,
    pub top_k: usize,
    pub stop_on_no_improvement: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            top_k: DEFAULT_TOP_K,
            stop_on_no_improvement: true,
        }
    }
}

impl LoopConfig {
    /// Upper bound on model calls for one question.
    pub fn call_budget(&self) -> usize {
        2 + self.max_iter * (2 * self.top_k + 6)
    }
}

/// Issued queries in order, starting with the original question. No two
/// entries are equal after lowercasing and collapsing whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLog {
    entries: Vec<String>,
}

fn normalize_query(q: &str) -> String {
    collapse_whitespace(q).to_lowercase()
}

impl QueryLog {
    pub fn new(original: &str) -> Self {
        Self {
            entries: vec![original.to_string()],
        }
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn contains(&self, q: &str) -> bool {
        let n = normalize_query(q);
        self.entries.iter().any(|e| normalize_query(e) == n)
    }

    pub fn push(&mut self, q: String) -> Result<(), RewriteError> {
        if self.contains(&q) {
            return Err(RewriteError::DuplicateQuery(q));
        }
        self.entries.push(q);
        Ok(())
    }

    /// Numbered list, one entry per line.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, q)| format!("{}. {q}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error(transparent)]
    Call(#[from] CallError),
    #[error("no \"### New Question\" line in reply: {0:?}")]
    Parse(String),
    #[error("rewritten question repeats an earlier one: {0:?}")]
    DuplicateQuery(String),
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("memory initialization failed: {0}")]
    InitFailed(String),
    #[error("answer generation failed: {0}")]
    AnswerFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Sufficient,
    NoImprovement,
    MaxIter,
    RewriteFailed,
}

impl StopReason {
    pub const ALL: [StopReason; 4] = [
        StopReason::Sufficient,
        StopReason::NoImprovement,
        StopReason::MaxIter,
        StopReason::RewriteFailed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Sufficient => "sufficient",
            StopReason::NoImprovement => "no_improvement",
            StopReason::MaxIter => "max_iter",
            StopReason::RewriteFailed => "rewrite_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRef {
    pub passage_id: String,
    pub rank: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageSummary {
    pub passage_id: String,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub step: usize,
    pub issued_query: String,
    pub retrieved: Vec<RetrievedRef>,
    pub verdicts: Vec<ChunkRecord>,
    pub passages: Vec<PassageSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<AgentTranscript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_result: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sufficiency: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note_before: Option<u32>,
    pub note_after: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl IterationTrace {
    fn new(step: usize, issued_query: &str, chunks: &[Chunk]) -> Self {
        Self {
            step,
            issued_query: issued_query.to_string(),
            retrieved: chunks
                .iter()
                .map(|c| RetrievedRef {
                    passage_id: c.passage_id.clone(),
                    rank: c.rank,
                    score: c.score,
                })
                .collect(),
            verdicts: Vec::new(),
            passages: Vec::new(),
            transcript: None,
            compare_result: None,
            sufficiency: None,
            note_before: None,
            note_after: 0,
            flags: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub query: Query,
    pub final_note: MemoryNote,
    pub answer: Answer,
    pub iterations: Vec<IterationTrace>,
    pub query_log: Vec<String>,
    pub llm_calls: u64,
    pub stopped_because: StopReason,
}

/// Writes the first note from the step-1 passages.
pub fn init_memory(
    ctx: &Context<'_>,
    query: &Query,
    passages: &[FilteredPassage],
) -> Result<MemoryNote, RunError> {
    let refs = join_refs(passages);
    let text = ctx
        .ask(
            TemplateName::MemoryInit,
            &[("query", &query.text), ("refs", &refs)],
        )
        .map_err(|e| RunError::InitFailed(e.to_string()))?;
    if text.trim().is_empty() {
        return Err(RunError::InitFailed("model returned an empty note".into()));
    }
    Ok(MemoryNote::initialized(text))
}

/// Reads `{"sufficient": true | false}`.
pub fn parse_sufficiency(raw: &str) -> Option<bool> {
    match json_object(raw)?.0.get("sufficient")? {
        Value::Bool(b) => Some(*b),
        _ => None,
    }
}

/// Whether `note` answers the question. Any failure counts as "not yet"
/// and is described in the returned flag.
pub fn judge_sufficiency(
    ctx: &Context<'_>,
    query: &Query,
    note: &MemoryNote,
) -> (bool, Option<String>) {
    match ctx.ask(
        TemplateName::SufficiencyJudge,
        &[("query", &query.text), ("note", &note.text)],
    ) {
        Ok(raw) => match parse_sufficiency(&raw) {
            Some(b) => (b, None),
            None => (
                false,
                Some(format!(
                    "unparseable sufficiency reply, continuing: {raw:?}"
                )),
            ),
        },
        Err(e) => (
            false,
            Some(format!("sufficiency call failed, continuing: {e}")),
        ),
    }
}

/// Text after the last line starting with the rewrite marker, with an
/// optional colon and surrounding whitespace removed.
pub fn parse_rewrite(raw: &str) -> Option<String> {
    raw.lines()
        .rev()
        .find_map(|line| line.trim_start().strip_prefix(REWRITE_MARKER))
        .map(|rest| {
            let rest = rest.trim_start();
            rest.strip_prefix(':').unwrap_or(rest).trim().to_string()
        })
        .filter(|q| !q.is_empty())
}

pub fn rewrite_query(
    ctx: &Context<'_>,
    query: &Query,
    note: &MemoryNote,
    log: &QueryLog,
) -> Result<String, RewriteError> {
    let rendered = log.render();
    let raw = ctx.ask(
        TemplateName::QueryRewrite,
        &[
            ("query", &query.text),
            ("note", &note.text),
            ("query_log", &rendered),
        ],
    )?;
    let q = parse_rewrite(&raw).ok_or(RewriteError::Parse(raw))?;
    if log.contains(&q) {
        return Err(RewriteError::DuplicateQuery(q));
    }
    Ok(q)
}

/// Answers from the note alone.
pub fn generate_answer(
    ctx: &Context<'_>,
    query: &Query,
    note: &MemoryNote,
) -> Result<Answer, RunError> {
    let text = ctx
        .ask(
            TemplateName::FinalAnswer,
            &[("query", &query.text), ("note", &note.text)],
        )
        .map_err(|e| RunError::AnswerFailed(e.to_string()))?;
    let text = text.trim();
    if text.is_empty() {
        return Err(RunError::AnswerFailed(
            "model returned an empty answer".into(),
        ));
    }
    Ok(Answer {
        text: text.to_string(),
    })
}

fn retrieve_and_filter(
    ctx: &Context<'_>,
    retriever: &dyn Retriever,
    issued: &str,
    step: usize,
    top_k: usize,
) -> (IterationTrace, Vec<FilteredPassage>) {
    let mut chunks = retriever.search(issued, top_k);
    for c in &mut chunks {
        c.step = step;
    }
    let mut trace = IterationTrace::new(step, issued, &chunks);
    let filtered = filter_chunks(ctx, issued, &chunks);
    trace.verdicts = filtered.records;
    trace.flags = filtered.flags;
    trace.passages = filtered
        .passages
        .iter()
        .map(|p| PassageSummary {
            passage_id: p.source.passage_id.clone(),
            sentences: p.sentences.clone(),
        })
        .collect();
    (trace, filtered.passages)
}

/// Runs the whole loop for one question. Calls are counted through a meter
/// wrapped around `ctx.llm`.
pub fn run_question(
    ctx: &Context<'_>,
    retriever: &dyn Retriever,
    config: &LoopConfig,
    query: &Query,
) -> Result<RunResult, RunError> {
    let meter = Metered::new(ctx.llm);
    let ctx = Context::new(&meter, ctx.prompts);
    let max_iter = config.max_iter.max(1);

    let mut log = QueryLog::new(&query.text);
    let mut iterations = Vec::new();

    let (mut trace, passages) = retrieve_and_filter(&ctx, retriever, &query.text, 1, config.top_k);
    let mut best = init_memory(&ctx, query, &passages)?;
    trace.note_after = best.version;
    let (sufficient, flag) = judge_sufficiency(&ctx, query, &best);
    trace.sufficiency = Some(sufficient);
    trace.flags.extend(flag);
    iterations.push(trace);

    let mut t = 1;
    let stopped_because = if sufficient {
        StopReason::Sufficient
    } else {
        loop {
            if t >= max_iter {
                break StopReason::MaxIter;
            }
            let issued = match rewrite_query(&ctx, query, &best, &log) {
                Ok(q) => q,
                Err(e) => {
                    if let Some(last) = iterations.last_mut() {
                        last.flags.push(format!("rewrite failed: {e}"));
                    }
                    break StopReason::RewriteFailed;
                }
            };
            log.push(issued.clone())
                .expect("rewrite already checked against the log");
            t += 1;

            let (mut trace, passages) =
                retrieve_and_filter(&ctx, retriever, &issued, t, config.top_k);
            trace.note_before = Some(best.version);
            let better = match update_memory(&ctx, query, &passages, &best) {
                Ok((candidate, transcript)) => {
                    trace.flags.extend(transcript.flags.iter().cloned());
                    trace.transcript = Some(transcript);
                    match compare_notes(&ctx, query, &best, &candidate) {
                        Ok(c) => {
                            trace.flags.extend(c.flag);
                            if c.better {
                                best = candidate;
                            }
                            c.better
                        }
                        Err(e) => {
                            trace
                                .flags
                                .push(format!("comparison failed, kept best note: {e}"));
                            false
                        }
                    }
                }
                Err(e) => {
                    trace
                        .flags
                        .push(format!("memory update failed, kept best note: {e}"));
                    false
                }
            };
            trace.compare_result = Some(better);
            trace.note_after = best.version;

            if !better && config.stop_on_no_improvement {
                iterations.push(trace);
                break StopReason::NoImprovement;
            }
            let (sufficient, flag) = judge_sufficiency(&ctx, query, &best);
            trace.sufficiency = Some(sufficient);
            trace.flags.extend(flag);
            iterations.push(trace);
            if sufficient {
                break StopReason::Sufficient;
            }
        }
    };

    let answer = generate_answer(&ctx, query, &best)?;
    Ok(RunResult {
        query: query.clone(),
        final_note: best,
        answer,
        iterations,
        query_log: log.entries,
        llm_calls: meter.calls(),
        stopped_because,
    })
}

/// One line of the run trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub trace_version: u32,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<RunResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TraceLine {
    pub fn new(id: &str, outcome: Result<RunResult, RunError>) -> Self {
        let (result, error) = match outcome {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            trace_version: TRACE_VERSION,
            id: id.to_string(),
            result,
            error,
        }
    }
}
