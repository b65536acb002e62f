//! Generic chat-completions HTTP provider.
//!
//! Speaks the widely used `POST {base_url}/chat/completions` JSON contract
//! with function-style tools. Nothing provider-specific is baked in: the
//! endpoint, model id and the environment variable holding the key all come
//! from configuration.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, CompletionRequest, CompletionResponse, LlmError, Outcome, Result, Role, ToolCall, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_output: u32,
    /// Name of the environment variable that holds the API key.
    pub api_key_env: Option<String>,
    pub timeout_seconds: f64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080/v1".into(),
            model: "default".into(),
            temperature: super::DEFAULT_TEMPERATURE,
            max_output: 8192,
            api_key_env: None,
            timeout_seconds: 600.0,
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                LlmError::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_seconds.max(1.0))))
            .build()
            .new_agent();
        Ok(Self {
            config,
            api_key,
            agent,
        })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

pub(crate) fn request_body(request: &CompletionRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| match m.role {
            Role::ToolResult => json!({
                "role": "tool",
                "tool_call_id": m.tool_call_id,
                "content": m.content,
            }),
            Role::Assistant if !m.tool_calls.is_empty() => json!({
                "role": "assistant",
                "content": if m.content.is_empty() { Value::Null } else { Value::String(m.content.clone()) },
                "tool_calls": m.tool_calls.iter().map(|c| json!({
                    "id": c.id,
                    "type": "function",
                    "function": {"name": c.name, "arguments": c.args.to_string()},
                })).collect::<Vec<_>>(),
            }),
            role => json!({"role": role.as_str(), "content": m.content}),
        })
        .collect();
    let mut body = json!({
        "model": request.model,
        "temperature": request.temperature,
        "max_tokens": request.max_output,
        "messages": messages,
    });
    if !request.tools.is_empty() {
        body["tools"] = Value::Array(
            request
                .tools
                .iter()
                .map(|t| {
                    json!({
                        "type": "function",
                        "function": {
                            "name": t.name,
                            "description": t.description,
                            "parameters": t.parameters_json(),
                        }
                    })
                })
                .collect(),
        );
    }
    body
}

pub(crate) fn parse_response_body(text: &str) -> Result<CompletionResponse> {
    let body: Value = serde_json::from_str(text)
        .map_err(|e| LlmError::Protocol(format!("response is not JSON: {e}")))?;
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| LlmError::Protocol("response has no choices[0].message".into()))?;
    let usage = Usage {
        input_tokens: body.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        output_tokens: body
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    let calls = message.get("tool_calls").and_then(Value::as_array);
    let outcome = match calls {
        Some(calls) if !calls.is_empty() => {
            let mut parsed = Vec::with_capacity(calls.len());
            for (i, c) in calls.iter().enumerate() {
                let name = c
                    .pointer("/function/name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| LlmError::Protocol(format!("tool call {i} has no function name")))?;
                let raw_args = c.pointer("/function/arguments").cloned().unwrap_or(Value::Null);
                let args = match raw_args {
                    Value::String(s) if s.trim().is_empty() => json!({}),
                    Value::String(s) => serde_json::from_str(&s).map_err(|e| {
                        LlmError::Protocol(format!("tool call `{name}` arguments are not JSON: {e}"))
                    })?,
                    Value::Null => json!({}),
                    other => other,
                };
                let id = c
                    .get("id")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("call-{i}"));
                parsed.push(ToolCall {
                    id,
                    name: name.to_string(),
                    args,
                });
            }
            Outcome::ToolCalls(parsed)
        }
        _ => {
            let text = message
                .get("content")
                .and_then(Value::as_str)
                .ok_or_else(|| LlmError::Protocol("message has neither content nor tool calls".into()))?;
            Outcome::FinalText(text.to_string())
        }
    };
    Ok(CompletionResponse { outcome, usage })
}

impl ChatBackend for HttpBackend {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        let mut call = self.agent.post(&self.endpoint());
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(request_body(request))
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(format!("reading body: {e}")))?;
        match status {
            200..=299 => parse_response_body(&text),
            429 => Err(LlmError::RateLimited(excerpt(&text))),
            500..=599 => Err(LlmError::Transport(format!("HTTP {status}: {}", excerpt(&text)))),
            _ => Err(LlmError::Protocol(format!("HTTP {status}: {}", excerpt(&text)))),
        }
    }

    fn name(&self) -> &str {
        "http"
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(300).collect()
}
