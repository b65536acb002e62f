//! Run lifecycle: intake, budget, setup → manager → aggregator, final
//! report, and the two knowledge evolution streams.

mod budget;
mod config;
mod evolve;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use budget::{
    default_reserve, enforce_budget, BudgetError, BudgetTracker, Clock, FakeClock, Phase, PhaseBudget, RunBudget,
    SystemClock, MIN_AGGREGATOR_RESERVE, RESERVE_FRACTION,
};
pub use config::{BudgetSettings, Settings, TaskSpec, DEFAULT_REPOS};
pub use evolve::{already_evolved, evolve_from_web, post_run_evolve, EvolutionEntry, EvolutionReport};

use crate::agents::{
    run_aggregator, run_manager, run_setup, AgentConfig, AgentOutcome, FinalManifest, RunContext, FINAL_INFERENCE,
};
use crate::builders::{BuilderError, FINAL_REPORT, RUN_FILE};
use crate::ingestion::IngestionError;
use crate::knowledge::{load_knowledge_base, IntegrityMode, KnowledgeError};
use crate::llm::{LlmClient, Usage};
use crate::prompts::PromptSet;
use crate::workspace::SolutionRepository;

pub const RUN_OUTPUT_FILE: &str = "run_output.json";

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("run {0} was already distilled into this knowledge base")]
    AlreadyEvolved(String),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Builder(#[from] BuilderError),
    #[error(transparent)]
    Ingestion(#[from] IngestionError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl OrchestratorError {
    /// 3 for bad input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            OrchestratorError::InvalidInput(_) | OrchestratorError::AlreadyEvolved(_) | OrchestratorError::Budget(_) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    Partial,
    Failed,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::Partial => 2,
            RunStatus::Failed => 1,
        }
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunStatus::Success => "success",
            RunStatus::Partial => "partial",
            RunStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    pub seconds: f64,
    /// Agent outcome, or `crashed: <message>`.
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    /// Sum over every transcript of the run.
    pub usage: Usage,
    pub transcripts: usize,
    /// As recorded by the client, for cross-checking.
    pub backend_calls: usize,
    pub backend_usage: Usage,
    pub phases: Vec<PhaseRecord>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub final_dir: PathBuf,
    pub status: RunStatus,
    pub failed_phase: Option<String>,
    pub manifest: Option<FinalManifest>,
    pub warnings: Vec<String>,
    pub ledger: RunLedger,
}

/// Everything `run_task` needs besides the backend and the clock.
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub task: TaskSpec,
    pub kb_path: PathBuf,
    pub run_dir: PathBuf,
    /// Defaults to `<task_id>-<UTC timestamp>`.
    pub run_id: Option<String>,
    pub n_repos: usize,
    pub budget: RunBudget,
    pub agents: AgentConfig,
    pub prompts: PromptSet,
}

impl RunRequest {
    pub fn new(task: TaskSpec, kb_path: PathBuf, run_dir: PathBuf, budget: RunBudget) -> Self {
        Self {
            task,
            kb_path,
            run_dir,
            run_id: None,
            n_repos: DEFAULT_REPOS,
            budget,
            agents: AgentConfig::default(),
            prompts: PromptSet::builtin(),
        }
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Runs one task end to end. Invalid input (task, budget, knowledge base,
/// used run folder) is an error before any backend call; everything after
/// that ends in a `RunOutput` whose status says how far the run got.
pub fn run_task(req: &RunRequest, client: LlmClient, clock: Arc<dyn Clock>) -> Result<RunOutput, OrchestratorError> {
    req.task.validate()?;
    req.budget.validate()?;
    if req.n_repos == 0 {
        return Err(OrchestratorError::InvalidInput("at least one repository is needed".into()));
    }
    let kb = load_knowledge_base(&req.kb_path)?;
    let integrity = kb.validate_integrity(IntegrityMode::Strict);
    if !integrity.is_clean() {
        return Err(KnowledgeError::Integrity(integrity).into());
    }
    if req.run_dir.join(RUN_FILE).exists() {
        return Err(OrchestratorError::InvalidInput(format!(
            "{} already holds a run",
            req.run_dir.display()
        )));
    }
    std::fs::create_dir_all(&req.run_dir).map_err(|e| io_err(&req.run_dir, e))?;
    let run_dir = std::fs::canonicalize(&req.run_dir).map_err(|e| io_err(&req.run_dir, e))?;
    let run_id = req
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{}-{}", req.task.task_id, chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ")));
    let tracker = enforce_budget(req.budget, clock)?;
    let brief = req.task.brief();

    let mut run_meta = serde_json::json!({
        "run_id": run_id,
        "task": {
            "task_id": brief.task_id,
            "description": brief.description,
            "metric_name": brief.metric_name,
            "higher_is_better": brief.higher_is_better,
            "data_dir": brief.data_dir,
        },
        "n_repos": req.n_repos,
        "kb": req.kb_path,
        "budget": req.budget,
        "started_at": chrono::Utc::now().to_rfc3339(),
    });
    let run_file = run_dir.join(RUN_FILE);
    crate::util::write_json(&run_file, &run_meta).map_err(|e| io_err(&run_file, e))?;

    let repos = (1..=req.n_repos)
        .map(|i| SolutionRepository::create(&run_dir, i))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| io_err(&run_dir, e))?;
    let agents = AgentConfig {
        execute_timeout: req.budget.per_execute_timeout,
        ..req.agents.clone()
    };
    let ctx = RunContext::new(run_dir.clone(), brief, Arc::new(kb), client.clone(), req.prompts.clone(), repos, agents);

    let mut phases = Vec::new();
    let mut warnings = Vec::new();
    let mut failed_phase = None;
    let mut timed = |name: &str, f: &mut dyn FnMut() -> String| {
        let start = tracker.elapsed();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => {
                let message = panic_message(p);
                log::error!("{name} phase crashed: {message}");
                failed_phase.get_or_insert_with(|| name.to_string());
                format!("crashed: {message}")
            }
        };
        phases.push(PhaseRecord {
            phase: name.to_string(),
            seconds: (tracker.elapsed() - start).as_secs_f64(),
            outcome,
        });
    };

    let search = tracker.phase(Phase::Search);
    timed("setup", &mut || {
        let out = run_setup(&ctx, &search);
        warnings.extend(out.warning);
        out.transcript.outcome.to_string()
    });
    timed("manager", &mut || {
        let t = run_manager(&ctx, &search);
        if t.outcome == AgentOutcome::BudgetExhausted {
            warnings.push("the manager was stopped at the search deadline".into());
        }
        t.outcome.to_string()
    });
    let aggregate = tracker.phase(Phase::Aggregator);
    let mut manifest = None;
    timed("aggregator", &mut || {
        let out = run_aggregator(&ctx, &aggregate);
        let outcome = out.transcript.as_ref().map_or("skipped".to_string(), |t| t.outcome.to_string());
        manifest = Some(out.manifest);
        outcome
    });

    let final_dir = ctx.final_dir();
    let has_entry = final_dir.join(FINAL_INFERENCE).is_file();
    let status = match (&failed_phase, &manifest) {
        (Some(_), _) => RunStatus::Failed,
        (None, Some(m)) if has_entry && !m.repos.is_empty() => RunStatus::Success,
        (None, Some(m)) if !m.candidates.is_empty() => RunStatus::Partial,
        _ => RunStatus::Failed,
    };

    let transcripts = ctx.transcripts.all();
    let mut usage = Usage::default();
    for t in &transcripts {
        usage += t.usage;
    }
    let output = RunOutput {
        run_id: run_id.clone(),
        run_dir: run_dir.clone(),
        final_dir: final_dir.clone(),
        status,
        failed_phase,
        manifest,
        warnings,
        ledger: RunLedger {
            usage,
            transcripts: transcripts.len(),
            backend_calls: client.ledger.call_count(),
            backend_usage: client.ledger.totals(),
            phases,
            total_seconds: tracker.elapsed().as_secs_f64(),
        },
    };

    let report = render_report(&output, &ctx, &req.kb_path);
    let report_path = run_dir.join(FINAL_REPORT);
    std::fs::create_dir_all(&final_dir)
        .and_then(|_| crate::util::atomic_write(&report_path, report.as_bytes()))
        .map_err(|e| io_err(&report_path, e))?;
    let out_path = run_dir.join(RUN_OUTPUT_FILE);
    crate::util::write_json(&out_path, &output).map_err(|e| io_err(&out_path, e))?;
    run_meta["status"] = serde_json::json!(status);
    run_meta["finished_at"] = serde_json::json!(chrono::Utc::now().to_rfc3339());
    crate::util::write_json(&run_file, &run_meta).map_err(|e| io_err(&run_file, e))?;
    Ok(output)
}

fn render_report(out: &RunOutput, ctx: &RunContext, kb_path: &Path) -> String {
    let mut r = format!("# Run {}\n\nStatus: {}\n", out.run_id, out.status);
    if let Some(p) = &out.failed_phase {
        r.push_str(&format!("Failed phase: {p}\n"));
    }
    r.push_str(&format!("\n## Task\n\n{}\n", ctx.task.render()));

    r.push_str("\n## Chosen output\n\n");
    match &out.manifest {
        Some(m) if !m.repos.is_empty() => {
            let names: Vec<String> = m.repos.iter().map(|i| format!("repo-{i}")).collect();
            r.push_str(&format!("Source repositories: {}\n", names.join(", ")));
            if let Some(s) = m.strategy {
                r.push_str(&format!("Strategy: {} (decided by {})\n", serde_json::to_value(s).unwrap_or_default().as_str().unwrap_or("?"), m.decided_by));
            }
            let weights: Vec<String> = m.weights.iter().map(|(id, w)| format!("{id}={w:.4}")).collect();
            r.push_str(&format!("Weights: {}\n", weights.join(", ")));
            if let Some(score) = m.blend_score {
                r.push_str(&format!("Blend score on out-of-fold data: {score:.6}\n"));
            }
            match &m.inference {
                Some(e) => r.push_str(&format!("Entry script: final/{e} <test_dir> <output_file>\n")),
                None => r.push_str("Entry script: missing\n"),
            }
            for n in &m.notes {
                r.push_str(&format!("- {n}\n"));
            }
        }
        Some(m) => {
            r.push_str("No repository was selected.\n");
            for n in &m.notes {
                r.push_str(&format!("- {n}\n"));
            }
        }
        None => r.push_str("The aggregator did not produce a manifest.\n"),
    }

    r.push_str("\n## Repositories\n\n");
    for repo in &ctx.repos {
        r.push_str(&repo.summary(ctx.config.summary_results));
        r.push('\n');
    }

    let l = &out.ledger;
    r.push_str("\n## Ledger\n\n");
    r.push_str(&format!(
        "Agent invocations: {}\nBackend calls: {}\nTokens: {} in, {} out\nWall clock: {:.1}s\n",
        l.transcripts, l.backend_calls, l.usage.input_tokens, l.usage.output_tokens, l.total_seconds
    ));
    for p in &l.phases {
        r.push_str(&format!("- {}: {:.1}s, {}\n", p.phase, p.seconds, p.outcome));
    }
    if !out.warnings.is_empty() {
        r.push_str("\n## Warnings\n\n");
        for w in &out.warnings {
            r.push_str(&format!("- {w}\n"));
        }
    }
    r.push_str(&format!(
        "\n## Next steps\n\nDistil this run into the knowledge base:\n\n    kbforge evolve-run --run-dir {} --kb {}\n",
        out.run_dir.display(),
        kb_path.display()
    ));
    r
}

/// Wall-clock seconds as a `Duration`, for CLI flags.
pub fn seconds(value: f64) -> Result<Duration, OrchestratorError> {
    Duration::try_from_secs_f64(value)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| OrchestratorError::InvalidInput(format!("`{value}` is not a positive number of seconds")))
}
