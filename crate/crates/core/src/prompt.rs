//! Prompt templates and rendering.
//!
//! Templates use `{name}` placeholders. Literal braces are written doubled
//! (`{{` and `}}`) and come out single after rendering, which lets a template
//! carry JSON exemplars such as `{"NLI result":"xxx"}` next to placeholders.
//!
//! Rendering is strict in both directions: every placeholder needs a binding
//! and every binding must name a placeholder of the template.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::FilteredPassage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    MemoryInit,
    QueryRewrite,
    ChunkFilter,
    SentenceFilter,
    Reviewer,
    Challenger,
    Refiner,
    NoteCompare,
    SufficiencyJudge,
    FinalAnswer,
}

impl TemplateName {
    pub const ALL: [TemplateName; 10] = [
        TemplateName::MemoryInit,
        TemplateName::QueryRewrite,
        TemplateName::ChunkFilter,
        TemplateName::SentenceFilter,
        TemplateName::Reviewer,
        TemplateName::Challenger,
        TemplateName::Refiner,
        TemplateName::NoteCompare,
        TemplateName::SufficiencyJudge,
        TemplateName::FinalAnswer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::MemoryInit => "memory_init",
            TemplateName::QueryRewrite => "query_rewrite",
            TemplateName::ChunkFilter => "chunk_filter",
            TemplateName::SentenceFilter => "sentence_filter",
            TemplateName::Reviewer => "reviewer",
            TemplateName::Challenger => "challenger",
            TemplateName::Refiner => "refiner",
            TemplateName::NoteCompare => "note_compare",
            TemplateName::SufficiencyJudge => "sufficiency_judge",
            TemplateName::FinalAnswer => "final_answer",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateName::MemoryInit => include_str!("../prompts/memory_init"),
            TemplateName::QueryRewrite => include_str!("../prompts/query_rewrite"),
            TemplateName::ChunkFilter => include_str!("../prompts/chunk_filter"),
            TemplateName::SentenceFilter => include_str!("../prompts/sentence_filter"),
            TemplateName::Reviewer => include_str!("../prompts/reviewer"),
            TemplateName::Challenger => include_str!("../prompts/challenger"),
            TemplateName::Refiner => include_str!("../prompts/refiner"),
            TemplateName::NoteCompare => include_str!("../prompts/note_compare"),
            TemplateName::SufficiencyJudge => include_str!("../prompts/sufficiency_judge"),
            TemplateName::FinalAnswer => include_str!("../prompts/final_answer"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("no binding for placeholder {{{0}}}")]
    MissingBinding(String),
    #[error("binding {0:?} does not match any placeholder")]
    UnknownPlaceholder(String),
    #[error("malformed template at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: &'static str },
    #[error("unknown template name {0:?}")]
    UnknownTemplate(String),
    #[error("template {name} must use placeholders {expected:?}, found {found:?}")]
    PlaceholderMismatch {
        name: TemplateName,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

/// A parsed template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: Option<TemplateName>,
    body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    /// Parses `body`; fails on a lone brace that is neither escaped nor part
    /// of a `{identifier}` placeholder.
    pub fn parse(body: &str) -> Result<Self, PromptError> {
        let bytes = body.as_bytes();
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    literal.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    literal.push('}');
                    i += 2;
                }
                b'{' => {
                    let close = body[i + 1..].find('}').map(|p| i + 1 + p).ok_or(
                        PromptError::Malformed {
                            offset: i,
                            reason: "unclosed placeholder",
                        },
                    )?;
                    let ident = &body[i + 1..close];
                    if !is_identifier(ident) {
                        return Err(PromptError::Malformed {
                            offset: i,
                            reason: "placeholder is not an identifier",
                        });
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Slot(ident.to_string()));
                    i = close + 1;
                }
                b'}' => {
                    return Err(PromptError::Malformed {
                        offset: i,
                        reason: "unmatched closing brace",
                    })
                }
                _ => {
                    // Copy one full UTF-8 character.
                    let ch = body[i..].chars().next().expect("in bounds");
                    literal.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self {
            name: None,
            body: body.to_string(),
            segments,
        })
    }

    pub fn named(name: TemplateName, body: &str) -> Result<Self, PromptError> {
        let mut t = Self::parse(body)?;
        t.name = Some(name);
        Ok(t)
    }

    pub fn name(&self) -> Option<TemplateName> {
        self.name
    }

    /// The stored (escaped) template text.
    pub fn body(&self) -> &str {
        &self.body
    }

    /// Distinct placeholder names, sorted.
    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.as_str()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let placeholders = self.placeholders();
        if let Some((unknown, _)) = bindings.iter().find(|(k, _)| !placeholders.contains(k)) {
            return Err(PromptError::UnknownPlaceholder(unknown.to_string()));
        }
        let map: BTreeMap<&str, &str> = bindings.iter().copied().collect();
        let mut out = String::with_capacity(self.body.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Slot(name) => {
                    let value = map
                        .get(name.as_str())
                        .ok_or_else(|| PromptError::MissingBinding(name.clone()))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Renders `template` with `bindings`. Shorthand for [`PromptTemplate::render`].
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &[(&str, &str)],
) -> Result<String, PromptError> {
    template.render(bindings)
}

/// The full set of templates the pipeline uses.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateName::ALL
            .into_iter()
            .map(|n| {
                let t =
                    PromptTemplate::named(n, n.builtin_body()).expect("built-in templates parse");
                (n, t)
            })
            .collect();
        Self { templates }
    }

    /// Built-in templates overridden by any file in `dir` whose name is a
    /// template name. Other files are ignored. An override must use exactly
    /// the placeholders of the template it replaces.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for name in TemplateName::ALL {
            let path = dir.join(name.as_str());
            if !path.exists() {
                continue;
            }
            let body = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let template = PromptTemplate::named(name, &body)?;
            let expected = set.templates[&name].placeholders();
            if template.placeholders() != expected {
                return Err(PromptError::PlaceholderMismatch {
                    name,
                    expected: expected.iter().map(|s| s.to_string()).collect(),
                    found: template
                        .placeholders()
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                });
            }
            set.templates.insert(name, template);
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn render(
        &self,
        name: TemplateName,
        bindings: &[(&str, &str)],
    ) -> Result<String, PromptError> {
        self.get(name).render(bindings)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Text substituted for `{refs}` when no passage survived filtering.
pub const NO_REFERENCES: &str = "(no references)";

/// Serializes filtered passages for the `{refs}` placeholder: numbered
/// `[i] title` blocks separated by a blank line.
pub fn join_refs(passages: &[FilteredPassage]) -> String {
    if passages.is_empty() {
        return NO_REFERENCES.to_string();
    }
    passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}\n{}", i + 1, p.source.title, p.sentences.join(" ")))
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Chunk;
    use proptest::prelude::*;

    fn passage(title: &str, sentences: &[&str]) -> FilteredPassage {
        FilteredPassage {
            source: Chunk {
                passage_id: format!("{title}#0"),
                title: title.into(),
                text: sentences.join(" "),
                rank: 1,
                score: 1.0,
                step: 1,
            },
            sentences: sentences.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn substitutes_a_single_placeholder() {
        let t = PromptTemplate::parse("Q: {query}").unwrap();
        assert_eq!(t.render(&[("query", "who?")]).unwrap(), "Q: who?");
    }

    #[test]
    fn repeated_placeholder_is_filled_everywhere() {
        let t = PromptTemplate::parse("{a}{a}").unwrap();
        assert_eq!(t.render(&[("a", "x")]).unwrap(), "xx");
    }

    #[test]
    fn chunk_filter_ends_with_literal_json_exemplar() {
        let set = TemplateSet::builtin();
        let out = set
            .render(
                TemplateName::ChunkFilter,
                &[("External_Knowledge", "K"), ("Question", "Q")],
            )
            .unwrap();
        assert!(out.ends_with(r#"{"NLI result":"xxx"}"#));
        assert!(out.contains("External Knowledge: K\nQuestion: Q\n"));
    }

    #[test]
    fn missing_and_unknown_bindings_are_rejected() {
        let t = PromptTemplate::parse("{a} {b}").unwrap();
        assert_eq!(
            t.render(&[("a", "1")]),
            Err(PromptError::MissingBinding("b".into()))
        );
        assert_eq!(
            t.render(&[("a", "1"), ("b", "2"), ("c", "3")]),
            Err(PromptError::UnknownPlaceholder("c".into()))
        );
    }

    #[test]
    fn lone_braces_are_malformed() {
        assert!(matches!(
            PromptTemplate::parse("{\"k\": 1}"),
            Err(PromptError::Malformed { .. })
        ));
        assert!(matches!(
            PromptTemplate::parse("a } b"),
            Err(PromptError::Malformed { .. })
        ));
        assert!(matches!(
            PromptTemplate::parse("{open"),
            Err(PromptError::Malformed { .. })
        ));
    }

    #[test]
    fn escaped_braces_render_single() {
        let t = PromptTemplate::parse("{{\"x\": \"{v}\"}}").unwrap();
        assert_eq!(t.render(&[("v", "1")]).unwrap(), "{\"x\": \"1\"}");
    }

    #[test]
    fn builtin_templates_have_expected_placeholders() {
        let set = TemplateSet::builtin();
        let expect: &[(TemplateName, &[&str])] = &[
            (TemplateName::MemoryInit, &["query", "refs"]),
            (TemplateName::QueryRewrite, &["note", "query", "query_log"]),
            (
                TemplateName::ChunkFilter,
                &["External_Knowledge", "Question"],
            ),
            (TemplateName::SentenceFilter, &["context", "query"]),
            (TemplateName::Reviewer, &["note", "query", "refs"]),
            (
                TemplateName::Challenger,
                &["note", "query", "refs", "review_info"],
            ),
            (
                TemplateName::Refiner,
                &["note", "query", "refs", "review_info", "suggestions"],
            ),
            (
                TemplateName::NoteCompare,
                &["best_note", "new_note", "query"],
            ),
            (TemplateName::SufficiencyJudge, &["note", "query"]),
            (TemplateName::FinalAnswer, &["note", "query"]),
        ];
        for (name, names) in expect {
            let got: Vec<&str> = set.get(*name).placeholders().into_iter().collect();
            assert_eq!(&got, names, "{name}");
        }
    }

    #[test]
    fn template_names_round_trip_through_strings() {
        for n in TemplateName::ALL {
            assert_eq!(n.as_str().parse::<TemplateName>().unwrap(), n);
        }
        assert!("nope".parse::<TemplateName>().is_err());
    }

    #[test]
    fn load_dir_overrides_only_present_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("final_answer"), "A? {query} / {note}").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(
            set.render(TemplateName::FinalAnswer, &[("query", "q"), ("note", "n")])
                .unwrap(),
            "A? q / n"
        );
        assert_eq!(
            set.get(TemplateName::Reviewer),
            TemplateSet::builtin().get(TemplateName::Reviewer)
        );
    }

    #[test]
    fn join_refs_formats() {
        assert_eq!(join_refs(&[]), "(no references)");
        assert_eq!(join_refs(&[passage("T", &["A.", "B."])]), "[1] T\nA. B.");
        assert_eq!(
            join_refs(&[passage("T", &["A."]), passage("U", &["B."])]),
            "[1] T\nA.\n\n[2] U\nB."
        );
    }

    proptest! {
        #[test]
        fn rendering_is_deterministic(a in ".*", b in ".*") {
            let t = PromptTemplate::parse("x {a} y {b} z").unwrap();
            let one = t.render(&[("a", &a), ("b", &b)]).unwrap();
            let two = t.render(&[("b", &b), ("a", &a)]).unwrap();
            prop_assert_eq!(one, two);
        }

        #[test]
        fn changing_one_binding_changes_output(a1 in ".*", a2 in ".*", b in ".*") {
            prop_assume!(a1 != a2);
            let t = PromptTemplate::parse("x {a} y {b} z {a}").unwrap();
            let one = t.render(&[("a", &a1), ("b", &b)]).unwrap();
            let two = t.render(&[("a", &a2), ("b", &b)]).unwrap();
            prop_assert_ne!(one, two);
        }
    }
}
