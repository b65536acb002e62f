//! Deterministic replay backend used by tests, examples, and `--scripted`
//! runs.
//!
//! A script is JSON Lines; each entry names a substring that must occur in
//! the last message of a request (plus an optional role filter) and the
//! response to return. Entries are consumed at most once, scanning in file
//! order.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::types::{estimate_message_tokens, estimate_tokens};
use super::{ChatBackend, CompletionRequest, CompletionResponse, LlmError, Outcome, Result, Role, ToolCall, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptMatch {
    pub substring: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedToolCall {
    pub name: String,
    #[serde(default)]
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptResponse {
    Text { text: String },
    ToolCalls { tool_calls: Vec<ScriptedToolCall> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    pub response: ScriptResponse,
}

impl ScriptEntry {
    pub fn text(substring: &str, text: &str) -> Self {
        Self {
            matcher: ScriptMatch {
                substring: substring.to_string(),
                role: None,
            },
            response: ScriptResponse::Text {
                text: text.to_string(),
            },
        }
    }

    pub fn tools(substring: &str, calls: Vec<(&str, Value)>) -> Self {
        Self {
            matcher: ScriptMatch {
                substring: substring.to_string(),
                role: None,
            },
            response: ScriptResponse::ToolCalls {
                tool_calls: calls
                    .into_iter()
                    .map(|(name, args)| ScriptedToolCall {
                        name: name.to_string(),
                        args,
                    })
                    .collect(),
            },
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.matcher.role = Some(role);
        self
    }

    fn matches(&self, request: &CompletionRequest) -> bool {
        let Some(last) = request.messages.last() else {
            return false;
        };
        if let Some(role) = self.matcher.role {
            if last.role != role {
                return false;
            }
        }
        last.content.contains(&self.matcher.substring)
    }
}

struct ScriptState {
    consumed: Vec<bool>,
    requests: Vec<CompletionRequest>,
}

pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let consumed = vec![false; entries.len()];
        Self {
            entries,
            state: Mutex::new(ScriptState {
                consumed,
                requests: Vec::new(),
            }),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::ScriptFormat {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(trimmed).map_err(|e| LlmError::ScriptFormat {
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn to_jsonl(entries: &[ScriptEntry]) -> String {
        let mut out = String::new();
        for e in entries {
            out.push_str(&serde_json::to_string(e).expect("script entries serialize"));
            out.push('\n');
        }
        out
    }

    /// Every request seen so far, in arrival order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.state.lock().expect("script state poisoned").requests.clone()
    }

    pub fn remaining(&self) -> usize {
        self.state
            .lock()
            .expect("script state poisoned")
            .consumed
            .iter()
            .filter(|c| !**c)
            .count()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        let mut state = self.state.lock().expect("script state poisoned");
        state.requests.push(request.clone());
        let hit = self
            .entries
            .iter()
            .enumerate()
            .find(|(i, e)| !state.consumed[*i] && e.matches(request))
            .map(|(i, _)| i);
        let Some(index) = hit else {
            let (role, tail) = request
                .messages
                .last()
                .map(|m| (m.role.as_str().to_string(), tail_excerpt(&m.content)))
                .unwrap_or_default();
            return Err(LlmError::ScriptExhausted { role, tail });
        };
        state.consumed[index] = true;
        let input_tokens = estimate_message_tokens(&request.messages) as u64;
        let (outcome, output_tokens) = match &self.entries[index].response {
            ScriptResponse::Text { text } => (Outcome::FinalText(text.clone()), estimate_tokens(text)),
            ScriptResponse::ToolCalls { tool_calls } => {
                let calls: Vec<ToolCall> = tool_calls
                    .iter()
                    .enumerate()
                    .map(|(k, c)| ToolCall {
                        id: format!("call-{}-{}", index + 1, k + 1),
                        name: c.name.clone(),
                        args: c.args.clone(),
                    })
                    .collect();
                let out = calls
                    .iter()
                    .map(|c| estimate_tokens(&c.name) + estimate_tokens(&c.args.to_string()))
                    .sum();
                (Outcome::ToolCalls(calls), out)
            }
        };
        Ok(CompletionResponse {
            outcome,
            usage: Usage {
                input_tokens,
                output_tokens: output_tokens as u64,
            },
        })
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

fn tail_excerpt(content: &str) -> String {
    let chars: Vec<char> = content.chars().collect();
    let start = chars.len().saturating_sub(200);
    chars[start..].iter().collect()
}
