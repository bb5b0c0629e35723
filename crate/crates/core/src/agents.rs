//! Memory update by three cooperating agents and the best-note comparison.
//!
//! A reviewer critiques the current note against new references, a
//! challenger turns the critique into suggestions, and a refiner rewrites the
//! note. The three calls always run in that order, once per update.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{FilteredPassage, MemoryNote, NoteOrigin, Query};
use crate::prompt::{join_refs, TemplateName};
use crate::reply::json_object;
use crate::{CallError, Context};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Reviewer,
    Challenger,
    Refiner,
}

impl std::fmt::Display for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Agent::Reviewer => "reviewer",
            Agent::Challenger => "challenger",
            Agent::Refiner => "refiner",
        })
    }
}

/// Everything the agents said during one update.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub review_info: String,
    pub suggestions: String,
    pub refined_note: String,
    pub call_count: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// An update aborted at `agent` after `call_count` completed calls.
#[derive(Debug, thiserror::Error)]
#[error("{agent} failed after {call_count} completed agent calls: {source}")]
pub struct UpdateError {
    pub agent: Agent,
    pub call_count: u32,
    #[source]
    pub source: CallError,
}

pub fn review(
    ctx: &Context<'_>,
    query: &Query,
    refs: &[FilteredPassage],
    note: &MemoryNote,
) -> Result<String, CallError> {
    let refs = join_refs(refs);
    ctx.ask(
        TemplateName::Reviewer,
        &[
            ("query", &query.text),
            ("refs", &refs),
            ("note", &note.text),
        ],
    )
}

pub fn challenge(
    ctx: &Context<'_>,
    query: &Query,
    refs: &[FilteredPassage],
    note: &MemoryNote,
    review_info: &str,
) -> Result<String, CallError> {
    let refs = join_refs(refs);
    ctx.ask(
        TemplateName::Challenger,
        &[
            ("query", &query.text),
            ("refs", &refs),
            ("note", &note.text),
            ("review_info", review_info),
        ],
    )
}

/// Returns the refined note text and whether it fell back to the input note
/// because the reply was blank.
pub fn refine(
    ctx: &Context<'_>,
    query: &Query,
    refs: &[FilteredPassage],
    note: &MemoryNote,
    review_info: &str,
    suggestions: &str,
) -> Result<(String, bool), CallError> {
    let refs = join_refs(refs);
    let reply = ctx.ask(
        TemplateName::Refiner,
        &[
            ("query", &query.text),
            ("refs", &refs),
            ("note", &note.text),
            ("review_info", review_info),
            ("suggestions", suggestions),
        ],
    )?;
    if reply.trim().is_empty() {
        Ok((note.text.clone(), true))
    } else {
        Ok((reply, false))
    }
}

/// Runs reviewer, challenger and refiner on `note` and returns the candidate
/// successor note. The caller decides whether to adopt it.
pub fn update_memory(
    ctx: &Context<'_>,
    query: &Query,
    refs: &[FilteredPassage],
    note: &MemoryNote,
) -> Result<(MemoryNote, AgentTranscript), UpdateError> {
    let fail = |agent, call_count, source| UpdateError {
        agent,
        call_count,
        source,
    };
    let review_info = review(ctx, query, refs, note).map_err(|e| fail(Agent::Reviewer, 0, e))?;
    let suggestions = challenge(ctx, query, refs, note, &review_info)
        .map_err(|e| fail(Agent::Challenger, 1, e))?;
    let (refined_note, fell_back) = refine(ctx, query, refs, note, &review_info, &suggestions)
        .map_err(|e| fail(Agent::Refiner, 2, e))?;

    let mut flags = Vec::new();
    let origin = if fell_back {
        flags.push("blank refinement, kept input note text".to_string());
        NoteOrigin::Kept
    } else {
        NoteOrigin::Refined
    };
    let candidate = note.successor(refined_note.clone(), origin);
    Ok((
        candidate,
        AgentTranscript {
            review_info,
            suggestions,
            refined_note,
            call_count: 3,
            flags,
        },
    ))
}

/// Reads `{"status": "True" | "False"}`; JSON booleans are accepted too.
pub fn parse_status(raw: &str) -> Option<bool> {
    let (object, _) = json_object(raw)?;
    match object.get("status")? {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

/// Judgment of whether `new_note` improves on `best_note`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: bool,
    pub raw: String,
    /// Set when the reply could not be parsed and `better` is the fallback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

/// An unparseable reply counts as "not better".
pub fn compare_notes(
    ctx: &Context<'_>,
    query: &Query,
    best_note: &MemoryNote,
    new_note: &MemoryNote,
) -> Result<Comparison, CallError> {
    let raw = ctx.ask(
        TemplateName::NoteCompare,
        &[
            ("query", &query.text),
            ("best_note", &best_note.text),
            ("new_note", &new_note.text),
        ],
    )?;
    Ok(match parse_status(&raw) {
        Some(better) => Comparison {
            better,
            raw,
            flag: None,
        },
        None => Comparison {
            better: false,
            flag: Some(format!("unparseable comparison, kept best note: {raw:?}")),
            raw,
        },
    })
}
