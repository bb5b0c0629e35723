//! OpenAI-compatible HTTP backend.
//!
//! Generation posts `{model, messages, temperature, max_tokens, logprobs?}`
//! to a chat-completions URL. Scoring needs a legacy completions URL that
//! supports `echo` with `logprobs`; without one, scoring is unsupported.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, LlmError, LlmRequest, LlmResponse, Role, TokenLogprob, Usage};

pub const API_KEY_ENV: &str = "AMBER_LLM_API_KEY";

/// Retries apply only to transport failures, HTTP 429 and 5xx.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

pub struct HttpBackend {
    endpoint: String,
    score_endpoint: Option<String>,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// `endpoint` is the full chat-completions URL. The bearer token is read
    /// from `AMBER_LLM_API_KEY` when set.
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            score_endpoint: None,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retry: RetryPolicy::default(),
            agent: build_agent(Duration::from_secs(120)),
        }
    }

    pub fn with_score_endpoint(mut self, url: impl Into<String>) -> Self {
        self.score_endpoint = Some(url.into());
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.agent = build_agent(timeout);
        self
    }

    fn post(&self, url: &str, body: &serde_json::Value) -> Result<String, LlmError> {
        let attempts = self.retry.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(self.retry.delay_before_retry(attempt - 1));
            }
            let mut req = self
                .agent
                .post(url)
                .header("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            match req.send(body.to_string()) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if (200..300).contains(&status) {
                        return Ok(text);
                    }
                    last_error = format!("HTTP {status}: {}", snippet(&text));
                    if status != 429 && status < 500 {
                        return Err(LlmError::Transport {
                            attempts: attempt,
                            message: last_error,
                        });
                    }
                }
                Err(e) => last_error = e.to_string(),
            }
            tracing::debug!("attempt {attempt}/{attempts} to {url} failed: {last_error}");
        }
        Err(LlmError::Transport {
            attempts,
            message: last_error,
        })
    }
}

fn build_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    logprobs: Option<CompletionLogprobs>,
}

#[derive(Deserialize)]
struct CompletionLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

impl Backend for HttpBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if request.want_logprobs {
            body["logprobs"] = json!(true);
        }
        let raw = self.post(&self.endpoint, &body)?;
        let parsed: ChatResponse = serde_json::from_str(&raw)
            .map_err(|e| LlmError::Protocol(format!("{e}: {}", snippet(&raw))))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Protocol("response has no choices".into()))?;
        Ok(LlmResponse {
            text: choice.message.content.unwrap_or_default(),
            token_logprobs: if request.want_logprobs {
                choice.logprobs.and_then(|l| l.content)
            } else {
                None
            },
            usage: parsed.usage.unwrap_or_default(),
        })
    }

    /// Echo-scores `prefix + continuation` and sums the logprobs of tokens
    /// that start inside the continuation. Offsets are in characters.
    fn score(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let url = self.score_endpoint.as_deref().ok_or_else(|| {
            LlmError::Unsupported("no completions endpoint configured for scoring".into())
        })?;
        let (prefix, continuation) = match request.messages.as_slice() {
            [p, c] if p.role == Role::User && c.role == Role::Assistant => (&p.content, &c.content),
            _ => {
                return Err(LlmError::InvalidRequest(
                    "score requests are [user prefix, assistant continuation]".into(),
                ))
            }
        };
        let prompt = format!("{prefix}{continuation}");
        let body = json!({
            "model": request.model,
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 1,
        });
        let raw = self.post(url, &body)?;
        let parsed: CompletionResponse = serde_json::from_str(&raw)
            .map_err(|e| LlmError::Protocol(format!("{e}: {}", snippet(&raw))))?;
        let lp = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| LlmError::Unsupported("endpoint returned no echo logprobs".into()))?;
        let start = prefix.chars().count();
        let end = start + continuation.chars().count();
        let tokens = lp
            .tokens
            .into_iter()
            .zip(lp.token_logprobs)
            .zip(lp.text_offset)
            .filter(|(_, offset)| (start..end).contains(offset))
            .filter_map(|((token, logprob), _)| {
                logprob.map(|logprob| TokenLogprob { token, logprob })
            })
            .collect();
        Ok(LlmResponse {
            text: String::new(),
            token_logprobs: Some(tokens),
            usage: Usage::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Message;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves the canned `(status, body)` replies in order, one per
    /// connection, and records each request body.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!(
            "http://{}/v1/chat/completions",
            listener.local_addr().unwrap()
        );
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, seen)
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(1),
        }
    }

    fn request() -> LlmRequest {
        LlmRequest {
            model: "m".into(),
            messages: vec![Message::user("hi")],
            temperature: 0.0,
            max_tokens: 8,
            want_logprobs: false,
            tag: Some("final_answer".into()),
        }
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"Paris"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;

    #[test]
    fn default_backoff_doubles() {
        let r = RetryPolicy::default();
        assert_eq!(r.delay_before_retry(1), Duration::from_millis(500));
        assert_eq!(r.delay_before_retry(2), Duration::from_millis(1000));
        assert_eq!(r.delay_before_retry(3), Duration::from_millis(2000));
    }

    #[test]
    fn parses_chat_completion_and_sends_wire_body() {
        let (url, seen) = serve(vec![(200, OK.into())]);
        let backend = HttpBackend::new(url)
            .with_api_key(None)
            .with_retry(fast_retry());
        let resp = backend.complete(&request()).unwrap();
        assert_eq!(resp.text, "Paris");
        assert_eq!(resp.usage.prompt_tokens, 3);
        let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["temperature"], 0.0);
        assert!(body.get("logprobs").is_none());
        assert!(body.get("tag").is_none());
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, seen) = serve(vec![
            (500, "{}".into()),
            (503, "{}".into()),
            (200, OK.into()),
        ]);
        let backend = HttpBackend::new(url)
            .with_api_key(None)
            .with_retry(fast_retry());
        assert_eq!(backend.complete(&request()).unwrap().text, "Paris");
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let (url, _) = serve(vec![(500, "{}".into()); 4]);
        let backend = HttpBackend::new(url)
            .with_api_key(None)
            .with_retry(fast_retry());
        assert!(matches!(
            backend.complete(&request()),
            Err(LlmError::Transport { attempts: 4, .. })
        ));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen) = serve(vec![(400, "{\"error\":\"bad\"}".into()), (200, OK.into())]);
        let backend = HttpBackend::new(url)
            .with_api_key(None)
            .with_retry(fast_retry());
        assert!(matches!(
            backend.complete(&request()),
            Err(LlmError::Transport { attempts: 1, .. })
        ));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn malformed_body_is_a_protocol_error() {
        let (url, _) = serve(vec![(200, "{\"nope\":1}".into())]);
        let backend = HttpBackend::new(url)
            .with_api_key(None)
            .with_retry(fast_retry());
        assert!(matches!(
            backend.complete(&request()),
            Err(LlmError::Protocol(_))
        ));
    }

    #[test]
    fn connection_refused_is_a_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!(
            "http://{}/v1/chat/completions",
            listener.local_addr().unwrap()
        );
        drop(listener);
        let backend = HttpBackend::new(url)
            .with_api_key(None)
            .with_retry(RetryPolicy {
                max_retries: 1,
                base_delay: Duration::from_millis(1),
            });
        assert!(matches!(
            backend.complete(&request()),
            Err(LlmError::Transport { attempts: 2, .. })
        ));
    }

    #[test]
    fn scoring_sums_continuation_tokens_only() {
        // prompt "Q? A: Paris" -> prefix "Q? A: " (6 chars), continuation "Paris".
        let body = r#"{"choices":[{"logprobs":{"tokens":["Q","?"," A",":"," ","Par","is","."],
            "token_logprobs":[null,-0.1,-0.2,-0.3,-0.4,-1.0,-0.5,-2.0],
            "text_offset":[0,1,2,4,5,6,9,11]}}]}"#;
        let (url, _) = serve(vec![(200, body.into())]);
        let backend = HttpBackend::new("http://unused")
            .with_score_endpoint(url)
            .with_api_key(None);
        let req = LlmRequest {
            model: "m".into(),
            messages: vec![Message::user("Q? A: "), Message::assistant("Paris")],
            temperature: 0.0,
            max_tokens: 1,
            want_logprobs: true,
            tag: None,
        };
        let resp = backend.score(&req).unwrap();
        let total: f64 = resp.token_logprobs.unwrap().iter().map(|t| t.logprob).sum();
        assert_eq!(total, -1.5);
    }

    #[test]
    fn scoring_without_completions_endpoint_is_unsupported() {
        let backend = HttpBackend::new("http://unused").with_api_key(None);
        let req = LlmRequest {
            model: "m".into(),
            messages: vec![Message::user("p"), Message::assistant("c")],
            temperature: 0.0,
            max_tokens: 1,
            want_logprobs: true,
            tag: None,
        };
        assert!(matches!(backend.score(&req), Err(LlmError::Unsupported(_))));
    }
}
