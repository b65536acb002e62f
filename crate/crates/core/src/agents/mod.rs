//! The tool-calling agent loop, context assembly, knowledge loading, and
//! the six roles (setup, manager, designer, coder, tuner, aggregator).

mod context;
mod query;
mod roles;
mod tools;
mod transcript;

use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use context::{assemble_context, elision_marker, index_message, Assembled, ContextError, ContextParts, DEFAULT_CONTEXT_BUDGET, SAFETY_MARGIN};
pub use query::{query_tool, LoadedKnowledge};
pub use roles::{
    parse_decision, parse_exports, run_aggregator, run_manager, run_setup, run_worker, worker_summary, AggregateOutcome,
    CandidateScore, Decision, FinalManifest, Lease, RunContext, SetupOutcome, Strategy, TaskBrief, ENV_DIR, FINAL_DIR,
    FINAL_INFERENCE, FINAL_MANIFEST,
};
pub use tools::{parse_repo_tool, tool_schemas, Toolset, BLEND_LABELS_FILE, BLEND_OOF_FILE};
pub use transcript::{
    now_ms, read_transcript, to_jsonl, AgentTranscript, Step, StepResponse, ToolExecution, TranscriptSink,
    TRANSCRIPTS_DIR,
};

use crate::llm::{ChatMessage, LlmClient, LlmError, Outcome, ToolCall, ToolSchema, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleName {
    Setup,
    Manager,
    Designer,
    Coder,
    Tuner,
    Aggregator,
}

impl RoleName {
    pub fn as_str(self) -> &'static str {
        match self {
            RoleName::Setup => "setup",
            RoleName::Manager => "manager",
            RoleName::Designer => "designer",
            RoleName::Coder => "coder",
            RoleName::Tuner => "tuner",
            RoleName::Aggregator => "aggregator",
        }
    }

    pub fn prompt(self) -> crate::prompts::PromptId {
        use crate::prompts::PromptId;
        match self {
            RoleName::Setup => PromptId::Setup,
            RoleName::Manager => PromptId::Manager,
            RoleName::Designer => PromptId::Designer,
            RoleName::Coder => PromptId::Coder,
            RoleName::Tuner => PromptId::Tuner,
            RoleName::Aggregator => PromptId::Aggregator,
        }
    }

    pub fn is_worker(self) -> bool {
        matches!(self, RoleName::Designer | RoleName::Coder | RoleName::Tuner)
    }
}

impl fmt::Display for RoleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentOutcome {
    Completed,
    StepLimit,
    BudgetExhausted,
    Failed,
    /// Manager only: every repository was halted.
    NoCandidates,
}

impl fmt::Display for AgentOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("outcome serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaxSteps {
    pub setup: usize,
    pub manager: usize,
    pub designer: usize,
    pub coder: usize,
    pub tuner: usize,
    pub aggregator: usize,
}

impl Default for MaxSteps {
    fn default() -> Self {
        Self {
            setup: 10,
            manager: 120,
            designer: 12,
            coder: 40,
            tuner: 30,
            aggregator: 20,
        }
    }
}

impl MaxSteps {
    pub fn for_role(&self, role: RoleName) -> usize {
        match role {
            RoleName::Setup => self.setup,
            RoleName::Manager => self.manager,
            RoleName::Designer => self.designer,
            RoleName::Coder => self.coder,
            RoleName::Tuner => self.tuner,
            RoleName::Aggregator => self.aggregator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_steps: MaxSteps,
    pub context_budget_tokens: usize,
    /// Default and ceiling for a single execute call.
    #[serde(with = "crate::llm::secs_f64")]
    pub execute_timeout: Duration,
    /// Results shown per repository in manager summaries.
    pub summary_results: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_steps: MaxSteps::default(),
            context_budget_tokens: DEFAULT_CONTEXT_BUDGET,
            execute_timeout: Duration::from_secs(3600),
            summary_results: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolReply {
    pub content: String,
    pub is_error: bool,
}

impl ToolReply {
    pub fn ok(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            is_error: false,
        }
    }

    pub fn error(content: impl Into<String>) -> Self {
        Self {
            content: format!("error: {}", content.into()),
            is_error: true,
        }
    }
}

/// A role's tools. `handle_batch` runs one response's calls and returns
/// their executions in completion order.
pub trait ToolHandler {
    fn schemas(&self) -> Vec<ToolSchema>;

    fn handle(&mut self, call: &ToolCall) -> ToolReply;

    fn handle_batch(&mut self, calls: &[ToolCall]) -> Vec<ToolExecution> {
        calls
            .iter()
            .map(|call| {
                let started_ms = now_ms();
                let reply = self.handle(call);
                execution(call, reply, started_ms)
            })
            .collect()
    }

    /// Checked before every completion; `Some` ends the loop.
    fn should_stop(&self) -> Option<AgentOutcome> {
        None
    }
}

pub(crate) fn execution(call: &ToolCall, reply: ToolReply, started_ms: i64) -> ToolExecution {
    ToolExecution {
        call_id: call.id.clone(),
        name: call.name.clone(),
        args: call.args.clone(),
        result: reply.content,
        is_error: reply.is_error,
        started_ms,
        ended_ms: now_ms(),
    }
}

/// Wall-clock budget as seen by one phase.
pub trait BudgetView: Send + Sync {
    fn exhausted(&self) -> bool;
    /// `None` means unbounded.
    fn remaining(&self) -> Option<Duration>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Unbounded;

impl BudgetView for Unbounded {
    fn exhausted(&self) -> bool {
        false
    }

    fn remaining(&self) -> Option<Duration> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub role: RoleName,
    pub repo_id: Option<usize>,
    pub seq: usize,
    pub max_steps: usize,
    pub context_budget: usize,
    pub prompt_version: Option<String>,
}

fn forbidden(role: RoleName, name: &str, offered: &BTreeSet<String>) -> ToolReply {
    let list: Vec<&str> = offered.iter().map(String::as_str).collect();
    ToolReply::error(format!(
        "tool `{name}` is not available to the {role} role; available tools: {}",
        list.join(", ")
    ))
}

/// The control loop: complete, run any requested tools, append, repeat.
/// Never panics on tool or backend failures; they end up in the transcript.
pub fn run_agent(
    spec: &AgentSpec,
    parts: &ContextParts,
    tools: &mut dyn ToolHandler,
    client: &LlmClient,
    budget: &dyn BudgetView,
) -> AgentTranscript {
    let schemas = tools.schemas();
    let offered: BTreeSet<String> = schemas.iter().map(|s| s.name.clone()).collect();
    let started_ms = now_ms();
    let mut history: Vec<Vec<ChatMessage>> = Vec::new();
    let mut steps = Vec::new();
    let mut usage = Usage::default();
    let mut outcome = AgentOutcome::StepLimit;
    let mut final_text = None;
    let mut error = None;
    let initial_context = assemble_context(parts, &[], usize::MAX)
        .map(|a| a.messages)
        .unwrap_or_default();

    for index in 1..=spec.max_steps {
        if let Some(stop) = tools.should_stop() {
            outcome = stop;
            break;
        }
        if budget.exhausted() {
            outcome = AgentOutcome::BudgetExhausted;
            break;
        }
        let step_started = now_ms();
        let assembled = match assemble_context(parts, &history, spec.context_budget) {
            Ok(a) => a,
            Err(e) => {
                outcome = AgentOutcome::Failed;
                error = Some(e.to_string());
                break;
            }
        };
        let request = client.request(assembled.messages, schemas.clone());
        let (calls, step_usage) = match client.complete(&request) {
            Ok(resp) => match resp.outcome {
                Outcome::FinalText(text) => {
                    usage += resp.usage;
                    steps.push(Step {
                        index,
                        started_ms: step_started,
                        ended_ms: now_ms(),
                        context_tokens: assembled.estimated_tokens,
                        elided_steps: assembled.elided_steps,
                        response: StepResponse::FinalText(text.clone()),
                        tools: Vec::new(),
                        usage: resp.usage,
                    });
                    outcome = AgentOutcome::Completed;
                    final_text = Some(text);
                    break;
                }
                Outcome::ToolCalls(calls) => (calls, resp.usage),
            },
            // the backend named tools outside the role; answer each with an error
            Err(LlmError::UnknownTool { response, .. }) => (response.tool_calls().to_vec(), response.usage),
            Err(e) => {
                steps.push(Step {
                    index,
                    started_ms: step_started,
                    ended_ms: now_ms(),
                    context_tokens: assembled.estimated_tokens,
                    elided_steps: assembled.elided_steps,
                    response: StepResponse::Error(e.to_string()),
                    tools: Vec::new(),
                    usage: Usage::default(),
                });
                outcome = AgentOutcome::Failed;
                error = Some(e.to_string());
                break;
            }
        };
        usage += step_usage;

        let mut executions = Vec::with_capacity(calls.len());
        let mut allowed = Vec::new();
        for call in &calls {
            if offered.contains(&call.name) {
                allowed.push(call.clone());
            } else {
                let t = now_ms();
                executions.push(execution(call, forbidden(spec.role, &call.name, &offered), t));
            }
        }
        if !allowed.is_empty() {
            executions.extend(tools.handle_batch(&allowed));
        }

        let mut turn = vec![ChatMessage::assistant_tool_calls(calls.clone())];
        turn.extend(executions.iter().map(|x| ChatMessage::tool_result(x.call_id.clone(), x.result.clone())));
        history.push(turn);
        steps.push(Step {
            index,
            started_ms: step_started,
            ended_ms: now_ms(),
            context_tokens: assembled.estimated_tokens,
            elided_steps: assembled.elided_steps,
            response: StepResponse::ToolCalls(calls),
            tools: executions,
            usage: step_usage,
        });
    }

    AgentTranscript {
        role: spec.role,
        repo_id: spec.repo_id,
        seq: spec.seq,
        prompt_version: spec.prompt_version.clone(),
        started_ms,
        ended_ms: now_ms(),
        initial_context,
        steps,
        outcome,
        final_text,
        error,
        usage,
    }
}
