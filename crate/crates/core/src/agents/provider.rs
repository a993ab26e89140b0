//! Completion providers.
//!
//! A provider turns one system+user prompt into text. The HTTP provider
//! speaks the OpenAI-compatible chat-completions shape; the scripted provider
//! replays canned responses and records every request it sees.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// `<run id>:<attempt, 3 digits>:<call kind>`
    pub request_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub provider_latency_ms: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider exhausted retries after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("provider request rejected: {0}")]
    Rejected(String),
    #[error("script exhausted: {0}")]
    ScriptExhausted(String),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
}

pub trait Provider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError>;
}

pub fn make_tag(run_id: &str, attempt: usize, kind: &str) -> String {
    format!("{run_id}:{attempt:03}:{kind}")
}

/// Split a request tag into (run id, attempt, kind).
pub fn parse_tag(tag: &str) -> Option<(&str, usize, &str)> {
    let mut it = tag.rsplitn(3, ':');
    let kind = it.next()?;
    let attempt = it.next()?.parse().ok()?;
    let run = it.next()?;
    Some((run, attempt, kind))
}

/// One canned reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Text(String),
    Failure { error: String },
}

impl From<&str> for ScriptEntry {
    fn from(s: &str) -> Self {
        ScriptEntry::Text(s.to_string())
    }
}

impl From<String> for ScriptEntry {
    fn from(s: String) -> Self {
        ScriptEntry::Text(s)
    }
}

#[derive(Debug)]
enum Script {
    Sequence(VecDeque<ScriptEntry>),
    Keyed(HashMap<(String, usize), ScriptEntry>),
}

/// Deterministic test double.
#[derive(Debug)]
pub struct ScriptedProvider {
    script: Mutex<Script>,
    log: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedProvider {
    /// Replies in order; fails once the list runs out.
    pub fn sequence<I, E>(entries: I) -> Self
    where
        I: IntoIterator<Item = E>,
        E: Into<ScriptEntry>,
    {
        Self {
            script: Mutex::new(Script::Sequence(
                entries.into_iter().map(Into::into).collect(),
            )),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Replies looked up by (call kind, attempt index) from the request tag.
    /// Entries are reusable, so a resumed run sees the same replies.
    pub fn keyed<I, K, E>(entries: I) -> Self
    where
        I: IntoIterator<Item = ((K, usize), E)>,
        K: Into<String>,
        E: Into<ScriptEntry>,
    {
        Self {
            script: Mutex::new(Script::Keyed(
                entries
                    .into_iter()
                    .map(|((k, a), e)| ((k.into(), a), e.into()))
                    .collect(),
            )),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Load a script file: a JSON array (sequence) or an array of
    /// `{"kind", "attempt", "reply"}` objects (keyed).
    pub fn from_json(text: &str) -> Result<Self, String> {
        #[derive(Deserialize)]
        struct Keyed {
            kind: String,
            attempt: usize,
            reply: ScriptEntry,
        }
        if let Ok(keyed) = serde_json::from_str::<Vec<Keyed>>(text) {
            return Ok(Self::keyed(
                keyed.into_iter().map(|k| ((k.kind, k.attempt), k.reply)),
            ));
        }
        serde_json::from_str::<Vec<ScriptEntry>>(text)
            .map(Self::sequence)
            .map_err(|e| format!("invalid script: {e}"))
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().expect("log lock").clone()
    }
}

impl Provider for ScriptedProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        self.log.lock().expect("log lock").push(request.clone());
        let entry = match &mut *self.script.lock().expect("script lock") {
            Script::Sequence(q) => q.pop_front(),
            Script::Keyed(map) => parse_tag(&request.request_tag)
                .and_then(|(_, attempt, kind)| map.get(&(kind.to_string(), attempt)).cloned()),
        };
        match entry {
            Some(ScriptEntry::Text(text)) => Ok(CompletionResponse {
                text,
                provider_latency_ms: 0.0,
                truncated: false,
            }),
            Some(ScriptEntry::Failure { error }) => Err(ProviderError::ExhaustedRetries {
                attempts: 3,
                last: error,
            }),
            None => Err(ProviderError::ScriptExhausted(request.request_tag.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    /// Bearer token, already resolved from its credential reference.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Attempts in total, first try included.
    pub max_attempts: u32,
    /// Delay before the first retry; doubles on every retry.
    pub backoff_base: Duration,
}

impl HttpProviderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            max_attempts: 3,
            backoff_base: Duration::from_secs(1),
        }
    }
}

pub struct HttpProvider {
    config: HttpProviderConfig,
    agent: ureq::Agent,
    retry_log: Mutex<Vec<String>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Done(CompletionResponse),
    Transient(String),
    Fatal(String),
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, ProviderError> {
        if !(config.endpoint.starts_with("http://") || config.endpoint.starts_with("https://")) {
            return Err(ProviderError::Unavailable(format!(
                "invalid endpoint URL {}",
                config.endpoint
            )));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            agent,
            retry_log: Mutex::new(Vec::new()),
        })
    }

    /// Reasons for each retry taken so far.
    pub fn retries(&self) -> Vec<String> {
        self.retry_log.lock().expect("retry lock").clone()
    }

    fn once(&self, request: &CompletionRequest) -> Attempt {
        let body = json!({
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let started = Instant::now();
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(format!("transport: {e}")),
        };
        let status = resp.status().as_u16();
        if status >= 500 || status == 429 {
            return Attempt::Transient(format!("HTTP {status}"));
        }
        if status >= 400 {
            let detail = resp.body_mut().read_to_string().unwrap_or_default();
            return Attempt::Fatal(format!("HTTP {status}: {detail}"));
        }
        let parsed: ChatResponse = match resp.body_mut().read_json() {
            Ok(p) => p,
            Err(e) => return Attempt::Transient(format!("bad response body: {e}")),
        };
        let Some(choice) = parsed.choices.into_iter().next() else {
            return Attempt::Transient("response has no choices".into());
        };
        Attempt::Done(CompletionResponse {
            text: choice.message.content.unwrap_or_default(),
            provider_latency_ms: started.elapsed().as_secs_f64() * 1000.0,
            truncated: choice.finish_reason.as_deref() == Some("length"),
        })
    }
}

impl Provider for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let mut delay = self.config.backoff_base;
        let mut last = String::new();
        let attempts = self.config.max_attempts.max(1);
        for n in 1..=attempts {
            match self.once(request) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(msg) => return Err(ProviderError::Rejected(msg)),
                Attempt::Transient(msg) => {
                    log::warn!("{}: attempt {n} failed: {msg}", request.request_tag);
                    last = msg;
                    if n < attempts {
                        self.retry_log
                            .lock()
                            .expect("retry lock")
                            .push(last.clone());
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(ProviderError::ExhaustedRetries { attempts, last })
    }
}
