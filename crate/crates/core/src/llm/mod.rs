//! Chat-completion gateway with live, scripted and record/replay backends.

mod http;
mod replay;
mod scripted;

use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::HttpBackend;
pub use replay::{CassetteRecord, ReplayBackend};
pub use scripted::{CallRange, Reply, Rule, Script, ScriptedBackend, When};

pub const DEFAULT_GENERATOR_TEMPERATURE: f64 = 1.2;
pub const DEFAULT_ANALYST_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_TOKENS: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Caller role (`generator`, `reflector`, `coordinator`, ...). Not part
    /// of the request hash.
    #[serde(default)]
    pub tag: String,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>, messages: Vec<ChatMessage>, temperature: f64) -> Self {
        Self {
            messages,
            temperature,
            max_tokens: DEFAULT_MAX_TOKENS,
            tag: tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if let Some(i) = self.messages.iter().skip(1).position(|m| m.role == Role::System) {
            return Err(LlmError::InvalidRequest(format!(
                "system message at position {} (only the first may be system)",
                i + 1
            )));
        }
        if self
            .messages
            .iter()
            .any(|m| m.role != Role::System && m.content.is_empty())
        {
            return Err(LlmError::InvalidRequest("empty user/assistant message".into()));
        }
        Ok(())
    }

    /// Content of the last user message, or "" when there is none.
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub backend_id: String,
    /// Seconds.
    pub latency: f64,
    pub token_usage: Option<TokenUsage>,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response did not contain text at {pointer}")]
    MalformedResponse { pointer: String },
    #[error("no script rule matched the {tag} request (call {call})")]
    ScriptNoMatch { tag: String, call: u64 },
    #[error("cassette has no recording for request {0}")]
    CassetteMiss(String),
    #[error("environment variable {0} is not set")]
    AuthMissing(String),
    #[error("{context}: {message}")]
    Load { context: String, message: String },
    #[error("cancelled")]
    Cancelled,
}

/// Something that answers chat requests. Implementations must be safe to
/// share across parallel loops.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Seconds; doubled per retry.
    pub base_backoff: f64,
    /// Seconds.
    pub max_backoff: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_backoff: 0.5,
            max_backoff: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct HttpSpec {
    /// e.g. `http://localhost:8000`
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token. `None`
    /// sends no Authorization header.
    #[serde(default)]
    pub auth_env: Option<String>,
    /// JSON pointer to the reply text.
    #[serde(default = "default_pointer")]
    pub response_pointer: String,
    /// Seconds per attempt.
    #[serde(default = "default_request_timeout")]
    pub request_timeout: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Upper bound on in-flight requests from all loops sharing this spec.
    #[serde(default)]
    pub max_concurrent: Option<usize>,
}

fn default_path() -> String {
    "/v1/chat/completions".into()
}

fn default_pointer() -> String {
    "/choices/0/message/content".into()
}

fn default_request_timeout() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ReplayFallback {
    /// A miss is an error.
    Error,
    /// A miss is forwarded to `delegate` and the answer appended to the
    /// cassette.
    Record { delegate: Box<BackendSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Http(HttpSpec),
    Scripted {
        script: PathBuf,
    },
    Replay {
        cassette: PathBuf,
        #[serde(default = "default_fallback")]
        fallback: ReplayFallback,
    },
}

fn default_fallback() -> ReplayFallback {
    ReplayFallback::Error
}

impl BackendSpec {
    /// Builds a backend. `stream` separates parallel processes: scripted
    /// rules can key on it and replay cassettes keep one recording stream
    /// per value.
    pub fn build(&self, stream: u64) -> Result<Arc<dyn ChatBackend>, LlmError> {
        self.build_with(stream, &Limiters::default())
    }

    fn build_with(&self, stream: u64, limiters: &Limiters) -> Result<Arc<dyn ChatBackend>, LlmError> {
        Ok(match self {
            BackendSpec::Http(spec) => {
                let limiter = spec.max_concurrent.map(|n| limiters.get(spec, n));
                Arc::new(HttpBackend::new(spec.clone(), limiter)?)
            }
            BackendSpec::Scripted { script } => {
                Arc::new(ScriptedBackend::new(Script::load(script)?, stream)?)
            }
            BackendSpec::Replay { cassette, fallback } => {
                let delegate = match fallback {
                    ReplayFallback::Error => None,
                    ReplayFallback::Record { delegate } => {
                        Some(delegate.build_with(stream, limiters)?)
                    }
                };
                Arc::new(ReplayBackend::open(cassette, stream, delegate)?)
            }
        })
    }

    /// Every file the spec refers to, for start-up validation.
    pub fn referenced_files(&self) -> Vec<PathBuf> {
        match self {
            BackendSpec::Http(_) => Vec::new(),
            BackendSpec::Scripted { script } => vec![script.clone()],
            BackendSpec::Replay { cassette, fallback } => {
                let mut v = Vec::new();
                match fallback {
                    ReplayFallback::Error => v.push(cassette.clone()),
                    ReplayFallback::Record { delegate } => v.extend(delegate.referenced_files()),
                }
                v
            }
        }
    }
}

/// One-shot convenience: build the backend and send one request.
pub fn complete(spec: &BackendSpec, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
    spec.build(0)?.complete(request)
}

/// Counting semaphore bounding in-flight HTTP requests.
#[derive(Debug)]
pub struct RequestLimiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl RequestLimiter {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> LimiterPermit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        LimiterPermit { limiter: self }
    }
}

pub struct LimiterPermit<'a> {
    limiter: &'a RequestLimiter,
}

impl Drop for LimiterPermit<'_> {
    fn drop(&mut self) {
        *self.limiter.free.lock().unwrap() += 1;
        self.limiter.cv.notify_one();
    }
}

/// Shares one limiter among all backends built from the same HTTP spec.
#[derive(Debug, Default, Clone)]
pub struct Limiters {
    by_spec: Arc<Mutex<Vec<(HttpSpec, Arc<RequestLimiter>)>>>,
}

impl Limiters {
    fn get(&self, spec: &HttpSpec, permits: usize) -> Arc<RequestLimiter> {
        let mut all = self.by_spec.lock().unwrap();
        if let Some((_, l)) = all.iter().find(|(s, _)| s == spec) {
            return l.clone();
        }
        let l = Arc::new(RequestLimiter::new(permits));
        all.push((spec.clone(), l.clone()));
        l
    }
}

/// The three backends one loop talks to.
#[derive(Clone)]
pub struct RoleBackends {
    pub generator: Arc<dyn ChatBackend>,
    pub reflector: Arc<dyn ChatBackend>,
    pub coordinator: Arc<dyn ChatBackend>,
}

impl RoleBackends {
    /// All three roles served by one backend.
    pub fn shared(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            generator: backend.clone(),
            reflector: backend.clone(),
            coordinator: backend,
        }
    }
}

/// Backend specs per role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSpecs {
    pub generator: BackendSpec,
    pub reflector: BackendSpec,
    pub coordinator: BackendSpec,
}

impl RoleSpecs {
    pub fn shared(spec: BackendSpec) -> Self {
        Self {
            generator: spec.clone(),
            reflector: spec.clone(),
            coordinator: spec,
        }
    }

    /// Builds one loop's backends. Identical specs share one instance so a
    /// single script or cassette sees the whole conversation.
    pub fn build(&self, stream: u64, limiters: &Limiters) -> Result<RoleBackends, LlmError> {
        let generator = self.generator.build_with(stream, limiters)?;
        let reflector = if self.reflector == self.generator {
            generator.clone()
        } else {
            self.reflector.build_with(stream, limiters)?
        };
        let coordinator = if self.coordinator == self.generator {
            generator.clone()
        } else if self.coordinator == self.reflector {
            reflector.clone()
        } else {
            self.coordinator.build_with(stream, limiters)?
        };
        Ok(RoleBackends {
            generator,
            reflector,
            coordinator,
        })
    }
}

/// One gateway call as seen by [`CallLog`].
#[derive(Debug, Clone)]
pub struct CallEvent {
    pub tag: String,
    pub at: Instant,
}

/// Wraps a backend and timestamps every call that reaches it.
pub struct CallLog<B> {
    inner: B,
    events: Arc<Mutex<Vec<CallEvent>>>,
}

impl<B: ChatBackend> CallLog<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            events: Arc::default(),
        }
    }

    pub fn events(&self) -> Vec<CallEvent> {
        self.events.lock().unwrap().clone()
    }
}

impl<B: ChatBackend> ChatBackend for CallLog<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.events.lock().unwrap().push(CallEvent {
            tag: request.tag.clone(),
            at: Instant::now(),
        });
        self.inner.complete(request)
    }
}

#[derive(Serialize)]
struct CanonicalMessage<'a> {
    role: Role,
    content: &'a str,
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    messages: Vec<CanonicalMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

/// SHA-256 over a fixed-order JSON rendering of the role/content sequence,
/// temperature and max_tokens.
///
/// ```
/// use hdlagent::llm::{canonical_request_hash, ChatMessage, ChatRequest};
///
/// let a = ChatRequest::new("generator", vec![ChatMessage::user("hi")], 1.2);
/// let mut b = a.clone();
/// b.tag = "reflector".into();
/// assert_eq!(canonical_request_hash(&a), canonical_request_hash(&b));
/// b.temperature = 0.2;
/// assert_ne!(canonical_request_hash(&a), canonical_request_hash(&b));
/// ```
pub fn canonical_request_hash(request: &ChatRequest) -> String {
    let canonical = CanonicalRequest {
        messages: request
            .messages
            .iter()
            .map(|m| CanonicalMessage {
                role: m.role,
                content: &m.content,
            })
            .collect(),
        temperature: request.temperature,
        max_tokens: request.max_tokens,
    };
    let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
    hex::encode(Sha256::digest(bytes))
}
