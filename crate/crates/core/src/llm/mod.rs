//! Chat-completion abstraction with tool calling.
//!
//! Every backend implements [`ChatBackend`]. Callers go through [`complete`]
//! (validation + usage accounting) or [`complete_with_retries`], usually via
//! an [`LlmClient`] that bundles a backend with its retry policy and ledger.

mod http;
mod scripted;
mod types;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{ScriptEntry, ScriptMatch, ScriptResponse, ScriptedBackend};
pub use types::{
    estimate_message_tokens, estimate_tokens, ChatMessage, CompletionRequest, CompletionResponse,
    Outcome, ParamType, Role, ToolCall, ToolParam, ToolSchema, Usage, DEFAULT_TEMPERATURE,
};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The response named tools the request did not offer. The response is
    /// kept so the agent loop can answer each call with an error result.
    #[error("protocol error: response calls unknown tool(s) {names:?}")]
    UnknownTool {
        names: Vec<String>,
        response: CompletionResponse,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("scripted backend exhausted; no unconsumed entry matches the last message ({role}): {tail:?}")]
    ScriptExhausted { role: String, tail: String },
    #[error("script format error at line {line}: {message}")]
    ScriptFormat { line: usize, message: String },
    #[error("gave up after {attempts} attempt(s): {last}")]
    RetriesExhausted {
        attempts: u32,
        history: Vec<String>,
        last: Box<LlmError>,
    },
    #[error("configuration error: {0}")]
    Config(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_) | LlmError::RateLimited(_))
    }
}

pub type Result<T, E = LlmError> = std::result::Result<T, E>;

/// A chat-completion provider. Implementations must be safe to share across
/// threads.
pub trait ChatBackend: Send + Sync {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<CompletionResponse>;

    fn name(&self) -> &str {
        "backend"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallRecord {
    pub usage: Usage,
    pub attempts: u32,
}

/// Per-run usage accounting. Totals are always the sum of recorded calls.
#[derive(Debug, Default)]
pub struct UsageLedger {
    calls: Mutex<Vec<CallRecord>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, usage: Usage, attempts: u32) {
        self.calls
            .lock()
            .expect("ledger poisoned")
            .push(CallRecord { usage, attempts });
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().expect("ledger poisoned").clone()
    }

    pub fn totals(&self) -> Usage {
        let mut total = Usage::default();
        for c in self.calls.lock().expect("ledger poisoned").iter() {
            total += c.usage;
        }
        total
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("ledger poisoned").len()
    }
}

/// Validate, call, check response invariants, and record usage.
pub fn complete(
    backend: &dyn ChatBackend,
    request: &CompletionRequest,
    ledger: &UsageLedger,
) -> Result<CompletionResponse> {
    let response = call_checked(backend, request)?;
    ledger.record(response.usage, 1);
    Ok(response)
}

fn call_checked(backend: &dyn ChatBackend, request: &CompletionRequest) -> Result<CompletionResponse> {
    request.validate()?;
    let response = backend.complete_raw(request)?;
    if let Outcome::ToolCalls(calls) = &response.outcome {
        if calls.is_empty() {
            return Err(LlmError::Protocol("response carries an empty tool call list".into()));
        }
        let unknown: Vec<String> = calls
            .iter()
            .filter(|c| !request.offers_tool(&c.name))
            .map(|c| c.name.clone())
            .collect();
        if !unknown.is_empty() {
            return Err(LlmError::UnknownTool {
                names: unknown,
                response,
            });
        }
    }
    Ok(response)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "secs_f64")]
    pub base_delay: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            multiplier: 1.0,
        }
    }

    fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no delay before the first try
        if attempt <= 1 {
            return Duration::ZERO;
        }
        self.base_delay
            .mul_f64(self.multiplier.powi(attempt as i32 - 2))
    }
}

/// Retry retryable failures with exponential backoff. Non-retryable errors
/// propagate on the attempt that produced them.
pub fn complete_with_retries(
    backend: &dyn ChatBackend,
    request: &CompletionRequest,
    policy: &RetryPolicy,
    ledger: &UsageLedger,
) -> Result<CompletionResponse> {
    if policy.max_attempts == 0 {
        return Err(LlmError::InvalidRequest("max_attempts must be at least 1".into()));
    }
    let mut history = Vec::new();
    let mut attempt = 0;
    loop {
        attempt += 1;
        std::thread::sleep(policy.delay_before(attempt));
        match call_checked(backend, request) {
            Ok(response) => {
                ledger.record(response.usage, attempt);
                return Ok(response);
            }
            Err(err) if err.is_retryable() => {
                log::warn!("{} attempt {attempt} failed: {err}", backend.name());
                history.push(err.to_string());
                if attempt >= policy.max_attempts {
                    return Err(LlmError::RetriesExhausted {
                        attempts: attempt,
                        history,
                        last: Box::new(err),
                    });
                }
            }
            Err(err) => return Err(err),
        }
    }
}

/// Backend + model settings + retry policy + shared ledger.
#[derive(Clone)]
pub struct LlmClient {
    pub backend: Arc<dyn ChatBackend>,
    pub model: String,
    pub temperature: f64,
    pub max_output: u32,
    pub retry: RetryPolicy,
    pub ledger: Arc<UsageLedger>,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            model: "default".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_output: 8192,
            retry: RetryPolicy::default(),
            ledger: Arc::new(UsageLedger::new()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn request(&self, messages: Vec<ChatMessage>, tools: Vec<ToolSchema>) -> CompletionRequest {
        CompletionRequest {
            model: self.model.clone(),
            temperature: self.temperature,
            messages,
            tools,
            max_output: self.max_output,
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        complete_with_retries(self.backend.as_ref(), request, &self.retry, &self.ledger)
    }

    /// Single-turn helper for tool-less prompts; returns the final text.
    pub fn ask(&self, messages: Vec<ChatMessage>) -> Result<String> {
        let request = self.request(messages, Vec::new());
        match self.complete(&request)?.outcome {
            Outcome::FinalText(text) => Ok(text),
            Outcome::ToolCalls(_) => Err(LlmError::Protocol(
                "expected a text answer, got tool calls".into(),
            )),
        }
    }
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend", &self.backend.name())
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .finish()
    }
}

pub(crate) mod secs_f64 {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        if !secs.is_finite() || secs < 0.0 {
            return Err(serde::de::Error::custom("duration must be a non-negative number of seconds"));
        }
        Ok(Duration::from_secs_f64(secs))
    }
}
