//! Per-invocation transcripts, persisted as JSON Lines.
//!
//! Line 1 is a header (role, repo, initial context), then one line per
//! step, then an end line with the outcome and usage totals.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AgentOutcome, RoleName};
use crate::llm::{ChatMessage, ToolCall, Usage};

pub const TRANSCRIPTS_DIR: &str = "transcripts";

pub fn now_ms() -> i64 {
    chrono::Utc::now().timestamp_millis()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolExecution {
    pub call_id: String,
    pub name: String,
    pub args: Value,
    pub result: String,
    pub is_error: bool,
    pub started_ms: i64,
    pub ended_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepResponse {
    FinalText(String),
    ToolCalls(Vec<ToolCall>),
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub started_ms: i64,
    pub ended_ms: i64,
    /// Estimated input tokens of the assembled request.
    pub context_tokens: usize,
    pub elided_steps: usize,
    pub response: StepResponse,
    /// In completion order.
    pub tools: Vec<ToolExecution>,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub role: RoleName,
    pub repo_id: Option<usize>,
    pub seq: usize,
    pub prompt_version: Option<String>,
    pub started_ms: i64,
    pub ended_ms: i64,
    /// The fixed context parts every request starts with.
    pub initial_context: Vec<ChatMessage>,
    pub steps: Vec<Step>,
    pub outcome: AgentOutcome,
    pub final_text: Option<String>,
    pub error: Option<String>,
    pub usage: Usage,
}

impl AgentTranscript {
    pub fn tool_executions(&self) -> impl Iterator<Item = &ToolExecution> {
        self.steps.iter().flat_map(|s| s.tools.iter())
    }

    pub fn file_name(&self) -> String {
        match self.repo_id {
            Some(r) => format!("{}-{}-{:03}.jsonl", self.role, r, self.seq),
            None => format!("{}-{:03}.jsonl", self.role, self.seq),
        }
    }

    /// Timestamps replaced by their order, for replay comparisons.
    pub fn normalized(&self) -> AgentTranscript {
        let mut t = self.clone();
        t.started_ms = 0;
        t.ended_ms = 0;
        for s in &mut t.steps {
            s.started_ms = 0;
            s.ended_ms = 0;
            for x in &mut s.tools {
                x.started_ms = 0;
                x.ended_ms = 0;
            }
        }
        t
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header {
        role: RoleName,
        repo_id: Option<usize>,
        seq: usize,
        prompt_version: Option<String>,
        started_ms: i64,
        initial_context: Vec<ChatMessage>,
    },
    Step(Step),
    End {
        outcome: AgentOutcome,
        final_text: Option<String>,
        error: Option<String>,
        usage: Usage,
        ended_ms: i64,
    },
}

pub fn to_jsonl(t: &AgentTranscript) -> String {
    let mut lines = vec![Line::Header {
        role: t.role,
        repo_id: t.repo_id,
        seq: t.seq,
        prompt_version: t.prompt_version.clone(),
        started_ms: t.started_ms,
        initial_context: t.initial_context.clone(),
    }];
    lines.extend(t.steps.iter().cloned().map(Line::Step));
    lines.push(Line::End {
        outcome: t.outcome,
        final_text: t.final_text.clone(),
        error: t.error.clone(),
        usage: t.usage,
        ended_ms: t.ended_ms,
    });
    let mut out = String::new();
    for line in lines {
        out.push_str(&serde_json::to_string(&line).expect("transcript lines serialize"));
        out.push('\n');
    }
    out
}

pub fn read_transcript(path: &Path) -> Result<AgentTranscript, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| {
        serde_json::from_str::<Line>(l).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))
    });
    let Some(Line::Header {
        role,
        repo_id,
        seq,
        prompt_version,
        started_ms,
        initial_context,
    }) = lines.next().transpose()?
    else {
        return Err(format!("{}: missing header line", path.display()));
    };
    let mut steps = Vec::new();
    for line in lines {
        match line? {
            Line::Step(s) => steps.push(s),
            Line::End {
                outcome,
                final_text,
                error,
                usage,
                ended_ms,
            } => {
                return Ok(AgentTranscript {
                    role,
                    repo_id,
                    seq,
                    prompt_version,
                    started_ms,
                    ended_ms,
                    initial_context,
                    steps,
                    outcome,
                    final_text,
                    error,
                    usage,
                })
            }
            Line::Header { .. } => return Err(format!("{}: second header line", path.display())),
        }
    }
    Err(format!("{}: missing end line", path.display()))
}

/// Hands out sequence numbers and writes finished transcripts.
#[derive(Debug)]
pub struct TranscriptSink {
    dir: Option<PathBuf>,
    seq: AtomicUsize,
    written: Mutex<Vec<AgentTranscript>>,
}

impl TranscriptSink {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            seq: AtomicUsize::new(0),
            written: Mutex::new(Vec::new()),
        }
    }

    pub fn in_run_dir(run_dir: &Path) -> Self {
        Self::new(Some(run_dir.join(TRANSCRIPTS_DIR)))
    }

    pub fn next_seq(&self) -> usize {
        self.seq.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub fn record(&self, t: &AgentTranscript) {
        if let Some(dir) = &self.dir {
            let path = dir.join(t.file_name());
            let written = std::fs::create_dir_all(dir).and_then(|_| crate::util::atomic_write(&path, to_jsonl(t).as_bytes()));
            if let Err(e) = written {
                log::warn!("could not write transcript {}: {e}", path.display());
            }
        }
        self.written.lock().expect("sink poisoned").push(t.clone());
    }

    /// Every transcript recorded so far, in completion order.
    pub fn all(&self) -> Vec<AgentTranscript> {
        self.written.lock().expect("sink poisoned").clone()
    }
}
