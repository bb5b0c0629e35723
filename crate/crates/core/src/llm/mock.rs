//! Scripted mock backend.
//!
//! A script is a JSON-lines file. An optional first line `{"mode": "matched"}`
//! (or `"sequential"`, the default) selects the playback mode; every other
//! line is one entry:
//!
//! ```json
//! {"template": "chunk_filter", "contains": "Eiffel", "text": "{\"NLI result\":\"useful\"}"}
//! {"template": "score_continuation", "logprobs": [-1.0, -0.5]}
//! {"template": "reviewer", "fail": "connection reset"}
//! ```
//!
//! `template` and `contains` are both optional; an entry without them matches
//! any request. `contains` is searched in the concatenated message text.
//! `fail` makes the entry answer with a transport error.
//!
//! In sequential mode entries are consumed strictly in order and the next
//! entry must match the incoming request; in matched mode the first matching
//! entry answers and entries are never consumed.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, LlmError, LlmRequest, LlmResponse, TokenLogprob, Usage};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockMode {
    #[default]
    Sequential,
    Matched,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
}

impl Matcher {
    pub fn template(name: impl Into<String>) -> Self {
        Self {
            template: Some(name.into()),
            contains: None,
        }
    }

    pub fn applies(&self, request: &LlmRequest) -> bool {
        let template_ok = match (&self.template, &request.tag) {
            (None, _) => true,
            (Some(want), Some(tag)) => want == tag,
            (Some(_), None) => false,
        };
        template_ok
            && self
                .contains
                .as_ref()
                .is_none_or(|needle| request.full_text().contains(needle.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockEntry {
    pub matcher: Matcher,
    pub response: Result<LlmResponse, String>,
}

impl MockEntry {
    pub fn reply(matcher: Matcher, text: impl Into<String>) -> Self {
        Self {
            matcher,
            response: Ok(LlmResponse::text(text)),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contains: Option<String>,
    #[serde(default)]
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    usage: Option<Usage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fail: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    mode: MockMode,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockScript {
    pub mode: MockMode,
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn sequential(entries: Vec<MockEntry>) -> Self {
        Self {
            mode: MockMode::Sequential,
            entries,
        }
    }

    pub fn matched(entries: Vec<MockEntry>) -> Self {
        Self {
            mode: MockMode::Matched,
            entries,
        }
    }

    /// Parses the JSON-lines script format. Errors carry the 1-based line.
    pub fn parse(source: &str) -> Result<Self, String> {
        let mut script = MockScript::default();
        let mut first = true;
        for (idx, line) in source.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if first {
                first = false;
                if let Ok(header) = serde_json::from_str::<HeaderLine>(line) {
                    script.mode = header.mode;
                    continue;
                }
            }
            let entry: EntryLine = serde_json::from_str(line)
                .map_err(|e| format!("mock script line {}: {e}", idx + 1))?;
            let response = match entry.fail {
                Some(message) => Err(message),
                None => Ok(LlmResponse {
                    text: entry.text,
                    token_logprobs: entry.logprobs.map(|lps| {
                        lps.into_iter()
                            .enumerate()
                            .map(|(i, logprob)| TokenLogprob {
                                token: format!("<t{i}>"),
                                logprob,
                            })
                            .collect()
                    }),
                    usage: entry.usage.unwrap_or_default(),
                }),
            };
            script.entries.push(MockEntry {
                matcher: Matcher {
                    template: entry.template,
                    contains: entry.contains,
                },
                response,
            });
        }
        Ok(script)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let source =
            std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&source)
    }

    /// Serializes back to the JSON-lines format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if self.mode == MockMode::Matched {
            out.push_str("{\"mode\":\"matched\"}\n");
        }
        for entry in &self.entries {
            let line = match &entry.response {
                Ok(r) => EntryLine {
                    template: entry.matcher.template.clone(),
                    contains: entry.matcher.contains.clone(),
                    text: r.text.clone(),
                    logprobs: r
                        .token_logprobs
                        .as_ref()
                        .map(|t| t.iter().map(|t| t.logprob).collect()),
                    usage: (r.usage != Usage::default()).then_some(r.usage),
                    fail: None,
                },
                Err(message) => EntryLine {
                    template: entry.matcher.template.clone(),
                    contains: entry.matcher.contains.clone(),
                    text: String::new(),
                    logprobs: None,
                    usage: None,
                    fail: Some(message.clone()),
                },
            };
            out.push_str(&serde_json::to_string(&line).expect("entry serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Default)]
struct State {
    cursor: usize,
    log: Vec<LlmRequest>,
}

/// Deterministic backend that plays a [`MockScript`] and records every
/// request it receives.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    state: Mutex<State>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            state: Mutex::new(State::default()),
        }
    }

    pub fn mode(&self) -> MockMode {
        self.script.mode
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<LlmRequest> {
        self.state.lock().expect("mock poisoned").log.clone()
    }

    /// Entries consumed so far (sequential mode).
    pub fn consumed(&self) -> usize {
        self.state.lock().expect("mock poisoned").cursor
    }

    /// Entries not yet consumed (sequential mode). Leftovers after a run mean
    /// the pipeline made fewer calls than the script expected.
    pub fn remaining(&self) -> usize {
        match self.script.mode {
            MockMode::Sequential => self.script.entries.len() - self.consumed(),
            MockMode::Matched => 0,
        }
    }

    fn next(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let mut state = self.state.lock().expect("mock poisoned");
        state.log.push(request.clone());
        let template = request.tag.clone().unwrap_or_else(|| "<untagged>".into());
        let entry = match self.script.mode {
            MockMode::Sequential => {
                let entry =
                    self.script
                        .entries
                        .get(state.cursor)
                        .ok_or(LlmError::MockExhausted {
                            consumed: state.cursor,
                        })?;
                if !entry.matcher.applies(request) {
                    return Err(LlmError::MockUnmatched {
                        template,
                        detail: format!("entry {} expects {:?}", state.cursor + 1, entry.matcher),
                    });
                }
                state.cursor += 1;
                entry
            }
            MockMode::Matched => self
                .script
                .entries
                .iter()
                .find(|e| e.matcher.applies(request))
                .ok_or_else(|| LlmError::MockUnmatched {
                    template,
                    detail: "no entry applies".into(),
                })?,
        };
        entry
            .response
            .clone()
            .map_err(|message| LlmError::Transport {
                attempts: 1,
                message,
            })
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        self.next(request)
    }

    fn score(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let response = self.next(request)?;
        if response.token_logprobs.is_none() {
            return Err(LlmError::Unsupported(
                "mock entry has no scripted logprobs".into(),
            ));
        }
        Ok(response)
    }
}
