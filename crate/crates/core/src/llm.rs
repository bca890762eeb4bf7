//! LLM gateway: one request/response surface over three interchangeable
//! backends — a live chat-completions HTTP endpoint, a deterministic scripted
//! mock, and a record/replay cache.
//!
//! Requests are content-addressed: the digest covers the message list only,
//! so it is stable across runs and independent of timing. The scripted table
//! and the replay cache share the same JSON-lines entry format, keyed by
//! `(tag, digest)`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

/// One completion request. `tag` names the pipeline stage issuing the call
/// (rule generation, entity extraction, SQL generation, feedback, correction)
/// and is used for fixture routing and accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub tag: String,
}

impl LlmRequest {
    /// Request with the default temperature of 0.0 (deterministic decoding
    /// where the backend honors it).
    pub fn new(tag: impl Into<String>, messages: Vec<Message>) -> Self {
        Self { messages, temperature: 0.0, max_tokens: None, tag: tag.into() }
    }

    /// Digest over the message contents only. Two requests with equal
    /// messages share a digest regardless of when or how they were issued.
    pub fn message_digest(&self) -> String {
        let mut buf = String::new();
        for m in &self.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            buf.push_str(role);
            buf.push('\u{1f}');
            buf.push_str(&m.content);
            buf.push('\u{1e}');
        }
        sha256_hex(&buf)
    }

    fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("request has no messages".into()));
        }
        if self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} is negative",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u32,
    pub completion: u32,
}

#[derive(Debug, Clone)]
pub struct LlmResponse {
    pub text: String,
    pub backend_id: String,
    pub token_counts: Option<TokenCounts>,
    pub latency: Duration,
    pub cache_hit: bool,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("scripted fixture miss for tag `{tag}`, digest {digest}")]
    FixtureMiss { tag: String, digest: String },
    #[error("replay cache miss for tag `{tag}`, digest {digest} (strict mode)")]
    CacheMiss { tag: String, digest: String },
    #[error("http backend failed after {attempts} attempts: {message}")]
    Http { attempts: u32, message: String },
    #[error("api key environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("malformed cache entry at {path}:{line}: {message}")]
    MalformedCache { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Uniform completion interface. Implementations must be safe to call from
/// multiple threads.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;

    /// Identifier recorded in traces and candidates.
    fn id(&self) -> &str;

    /// Approximate prompt-token budget, if the backend has one. Callers use
    /// this to decide when to split oversized prompts.
    fn token_budget(&self) -> Option<usize> {
        None
    }
}

/// Rough token estimate used for budget checks (4 chars per token).
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// One line of a scripted fixture table or replay cache.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub tag: String,
    pub digest: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
}

fn read_entries(path: &Path) -> Result<Vec<CacheEntry>, LlmError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CacheEntry =
            serde_json::from_str(&line).map_err(|e| LlmError::MalformedCache {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Deterministic mock backend: responses come from a fixture table keyed by
/// `(tag, message digest)`. A missing entry is an error, never a fallback.
pub struct ScriptedBackend {
    entries: HashMap<(String, String), String>,
    id: String,
    budget: Option<usize>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self { entries: HashMap::new(), id: "scripted".into(), budget: None }
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, LlmError> {
        let mut backend = Self::new();
        for entry in read_entries(path)? {
            backend.entries.insert((entry.tag, entry.digest), entry.text);
        }
        Ok(backend)
    }

    pub fn with_token_budget(mut self, budget: usize) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn insert(&mut self, tag: impl Into<String>, digest: impl Into<String>, text: impl Into<String>) {
        self.entries.insert((tag.into(), digest.into()), text.into());
    }

    /// Register the reply for a request, computing the digest from it.
    pub fn insert_for(&mut self, request: &LlmRequest, text: impl Into<String>) {
        self.insert(request.tag.clone(), request.message_digest(), text);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        let digest = request.message_digest();
        let key = (request.tag.clone(), digest.clone());
        match self.entries.get(&key) {
            Some(text) => Ok(LlmResponse {
                text: text.clone(),
                backend_id: self.id.clone(),
                token_counts: None,
                latency: Duration::ZERO,
                cache_hit: true,
            }),
            None => Err(LlmError::FixtureMiss { tag: request.tag.clone(), digest }),
        }
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn token_budget(&self) -> Option<usize> {
        self.budget
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    /// Cache misses are errors.
    Strict,
    /// Cache misses call the inner backend and persist the response.
    Record,
}

struct ReplayState {
    index: HashMap<(String, String), String>,
    file: Option<File>,
}

/// Record/replay cache over another backend. The cache file is JSON lines,
/// append-only, with a single writer guarded by a mutex.
pub struct ReplayBackend {
    inner: Option<Box<dyn LlmBackend>>,
    mode: ReplayMode,
    id: String,
    state: Mutex<ReplayState>,
}

impl ReplayBackend {
    /// Replay-only: every request must already be in the cache.
    pub fn strict(path: &Path) -> Result<Self, LlmError> {
        Self::open(path, ReplayMode::Strict, None)
    }

    /// Record misses through `inner` and persist them.
    pub fn record(path: &Path, inner: Box<dyn LlmBackend>) -> Result<Self, LlmError> {
        Self::open(path, ReplayMode::Record, Some(inner))
    }

    fn open(path: &Path, mode: ReplayMode, inner: Option<Box<dyn LlmBackend>>) -> Result<Self, LlmError> {
        let mut index = HashMap::new();
        if path.exists() {
            for entry in read_entries(path)? {
                index.insert((entry.tag, entry.digest), entry.text);
            }
        }
        let file = match mode {
            ReplayMode::Record => {
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                Some(OpenOptions::new().create(true).append(true).open(path)?)
            }
            ReplayMode::Strict => None,
        };
        Ok(Self {
            inner,
            mode,
            id: match mode {
                ReplayMode::Strict => "replay-strict".into(),
                ReplayMode::Record => "replay-record".into(),
            },
            state: Mutex::new(ReplayState { index, file }),
        })
    }

    pub fn entry_count(&self) -> usize {
        self.state.lock().unwrap().index.len()
    }
}

impl LlmBackend for ReplayBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        let digest = request.message_digest();
        let key = (request.tag.clone(), digest.clone());

        if let Some(text) = self.state.lock().unwrap().index.get(&key) {
            return Ok(LlmResponse {
                text: text.clone(),
                backend_id: self.id.clone(),
                token_counts: None,
                latency: Duration::ZERO,
                cache_hit: true,
            });
        }

        match self.mode {
            ReplayMode::Strict => Err(LlmError::CacheMiss { tag: request.tag.clone(), digest }),
            ReplayMode::Record => {
                let inner = self.inner.as_ref().expect("record mode has an inner backend");
                let response = inner.complete(request)?;
                let entry = CacheEntry {
                    tag: request.tag.clone(),
                    digest: digest.clone(),
                    text: response.text.clone(),
                    backend_id: Some(response.backend_id.clone()),
                };
                let mut state = self.state.lock().unwrap();
                // Re-check under the lock so concurrent misses append once.
                if !state.index.contains_key(&key) {
                    let line = serde_json::to_string(&entry).expect("cache entry serializes");
                    let file = state.file.as_mut().expect("record mode has a cache file");
                    writeln!(file, "{line}").map_err(LlmError::Io)?;
                    file.flush().map_err(LlmError::Io)?;
                    state.index.insert(key, response.text.clone());
                }
                Ok(LlmResponse { cache_hit: false, ..response })
            }
        }
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn token_budget(&self) -> Option<usize> {
        self.inner.as_ref().and_then(|b| b.token_budget())
    }
}

/// Configuration for the live chat-completions backend. The model name is an
/// opaque string from config; the API key comes from the named environment
/// variable and never from a file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_http_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub token_budget: Option<usize>,
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_http_timeout_secs() -> u64 {
    60
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    id: String,
}

const HTTP_ATTEMPTS: u32 = 3;

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| LlmError::MissingApiKey(config.api_key_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Http { attempts: 0, message: e.to_string() })?;
        let id = format!("http:{}", config.model);
        Ok(Self { config, api_key, client, id })
    }
}

#[derive(Serialize)]
struct ChatRequestBody<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponseBody {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = ChatRequestBody {
            model: &self.config.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };

        let started = Instant::now();
        let mut last_error = String::new();
        for attempt in 1..=HTTP_ATTEMPTS {
            let result = self
                .client
                .post(&url)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send();
            match result {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let parsed: ChatResponseBody = resp.json().map_err(|e| LlmError::Http {
                            attempts: attempt,
                            message: format!("bad response body: {e}"),
                        })?;
                        let text = parsed
                            .choices
                            .first()
                            .map(|c| c.message.content.clone())
                            .ok_or_else(|| LlmError::Http {
                                attempts: attempt,
                                message: "response has no choices".into(),
                            })?;
                        return Ok(LlmResponse {
                            text,
                            backend_id: self.id.clone(),
                            token_counts: parsed.usage.map(|u| TokenCounts {
                                prompt: u.prompt_tokens,
                                completion: u.completion_tokens,
                            }),
                            latency: started.elapsed(),
                            cache_hit: false,
                        });
                    }
                    let transient = status.as_u16() == 429 || status.is_server_error();
                    last_error = format!("http status {status}");
                    if !transient {
                        return Err(LlmError::Http { attempts: attempt, message: last_error });
                    }
                }
                Err(e) => {
                    last_error = e.to_string();
                }
            }
            if attempt < HTTP_ATTEMPTS {
                std::thread::sleep(Duration::from_millis(250 * (1 << (attempt - 1))));
            }
        }
        Err(LlmError::Http { attempts: HTTP_ATTEMPTS, message: last_error })
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn token_budget(&self) -> Option<usize> {
        self.config.token_budget
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(tag: &str, content: &str) -> LlmRequest {
        LlmRequest::new(tag, vec![Message::user(content)])
    }

    #[test]
    fn test_digest_stable_under_content_equality() {
        let a = request("t", "hello");
        let mut b = request("t", "hello");
        b.temperature = 0.7;
        b.max_tokens = Some(5);
        assert_eq!(a.message_digest(), b.message_digest());
    }

    #[test]
    fn test_digest_differs_on_content() {
        assert_ne!(request("t", "a").message_digest(), request("t", "b").message_digest());
    }

    #[test]
    fn test_digest_separates_roles() {
        let a = LlmRequest::new("t", vec![Message::system("x"), Message::user("y")]);
        let b = LlmRequest::new("t", vec![Message::user("x"), Message::system("y")]);
        assert_ne!(a.message_digest(), b.message_digest());
    }

    #[test]
    fn test_scripted_lookup_and_miss() {
        let mut backend = ScriptedBackend::new();
        let req = request("gen-rules", "prompt text");
        backend.insert_for(&req, "recorded reply");

        let resp = backend.complete(&req).unwrap();
        assert_eq!(resp.text, "recorded reply");
        assert!(resp.cache_hit);

        let miss = backend.complete(&request("gen-rules", "other")).unwrap_err();
        assert!(matches!(miss, LlmError::FixtureMiss { .. }));
    }

    #[test]
    fn test_scripted_tag_participates_in_key() {
        let mut backend = ScriptedBackend::new();
        let req = request("a", "same");
        backend.insert_for(&req, "reply");
        let other_tag = request("b", "same");
        assert!(matches!(backend.complete(&other_tag), Err(LlmError::FixtureMiss { .. })));
    }

    #[test]
    fn test_strict_replay_empty_cache_misses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(&path, "").unwrap();
        let backend = ReplayBackend::strict(&path).unwrap();
        let err = backend.complete(&request("t", "q")).unwrap_err();
        assert!(matches!(err, LlmError::CacheMiss { .. }));
    }

    #[test]
    fn test_record_then_replay_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");

        let mut scripted = ScriptedBackend::new();
        let req = request("t", "q");
        scripted.insert_for(&req, "live answer");

        let recorder = ReplayBackend::record(&path, Box::new(scripted)).unwrap();
        let first = recorder.complete(&req).unwrap();
        assert!(!first.cache_hit);
        let second = recorder.complete(&req).unwrap();
        assert!(second.cache_hit);
        assert_eq!(first.text, second.text);

        // A fresh strict replayer sees the persisted entry.
        let strict = ReplayBackend::strict(&path).unwrap();
        let replayed = strict.complete(&req).unwrap();
        assert_eq!(replayed.text, "live answer");
        assert!(replayed.cache_hit);
    }

    #[test]
    fn test_invalid_request_rejected() {
        let backend = ScriptedBackend::new();
        let empty = LlmRequest::new("t", vec![]);
        assert!(matches!(backend.complete(&empty), Err(LlmError::InvalidRequest(_))));

        let mut negative = request("t", "x");
        negative.temperature = -1.0;
        assert!(matches!(backend.complete(&negative), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn test_estimate_tokens_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
    }
}
