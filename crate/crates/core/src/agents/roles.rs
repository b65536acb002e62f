//! Role runners and the shared per-run context they read from.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::tools::Toolset;
use super::{run_agent, AgentConfig, AgentOutcome, AgentSpec, AgentTranscript, BudgetView, ContextParts, RoleName};
use crate::ensemble::Metric;
use crate::knowledge::KnowledgeBase;
use crate::llm::LlmClient;
use crate::prompts::{PromptError, PromptSet};
use crate::util::{head_tail, write_json};
use crate::workspace::{copy_tree, RepoStatus, SolutionRepository, CODE_DIR, CONFIG_FILE, PLAN_FILE, RESULTS_DIR};

pub const FINAL_DIR: &str = "final";
pub const FINAL_INFERENCE: &str = "inference";
pub const FINAL_MANIFEST: &str = "manifest.json";
pub const ENV_DIR: &str = "env";

const PLAN_EXCERPT: usize = 8_000;
const CONFIG_EXCERPT: usize = 4_000;

/// The task as agents see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBrief {
    pub task_id: String,
    pub description: String,
    pub metric_name: String,
    pub higher_is_better: bool,
    pub data_dir: PathBuf,
}

impl TaskBrief {
    pub fn render(&self) -> String {
        format!(
            "Task {}\nMetric: {} ({})\nData: {} (train/ and test/ subfolders)\n\n{}",
            self.task_id,
            self.metric_name,
            if self.higher_is_better { "higher is better" } else { "lower is better" },
            self.data_dir.display(),
            self.description.trim()
        )
    }

    /// The task metric when it is a built-in one, else one matching its direction.
    pub fn default_blend_metric(&self) -> Metric {
        self.metric_name.parse().unwrap_or(if self.higher_is_better {
            Metric::RankCorrelation
        } else {
            Metric::MeanAbsoluteError
        })
    }
}

/// Everything a run's agents share. Repositories are numbered from 1.
pub struct RunContext {
    pub run_dir: PathBuf,
    pub task: TaskBrief,
    pub kb: Arc<KnowledgeBase>,
    pub client: LlmClient,
    pub prompts: PromptSet,
    pub repos: Vec<SolutionRepository>,
    pub config: AgentConfig,
    pub transcripts: super::TranscriptSink,
    l1_index: String,
    env_overrides: RwLock<Vec<(String, String)>>,
    leases: Mutex<BTreeSet<usize>>,
}

/// Exclusive hold on one repository; released on drop.
pub struct Lease<'a> {
    run: &'a RunContext,
    repo: usize,
}

impl Drop for Lease<'_> {
    fn drop(&mut self) {
        self.run.leases.lock().expect("lease table poisoned").remove(&self.repo);
    }
}

impl RunContext {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        run_dir: PathBuf,
        task: TaskBrief,
        kb: Arc<KnowledgeBase>,
        client: LlmClient,
        prompts: PromptSet,
        repos: Vec<SolutionRepository>,
        config: AgentConfig,
    ) -> Self {
        let l1_index = kb.render_l1_index();
        Self {
            transcripts: super::TranscriptSink::in_run_dir(&run_dir),
            run_dir,
            task,
            kb,
            client,
            prompts,
            repos,
            config,
            l1_index,
            env_overrides: RwLock::new(Vec::new()),
            leases: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn repo(&self, id: usize) -> Option<&SolutionRepository> {
        id.checked_sub(1).and_then(|i| self.repos.get(i))
    }

    pub fn env_overrides(&self) -> Vec<(String, String)> {
        self.env_overrides.read().expect("env poisoned").clone()
    }

    pub fn set_env_overrides(&self, overrides: Vec<(String, String)>) {
        *self.env_overrides.write().expect("env poisoned") = overrides;
    }

    pub fn try_lease(&self, repo: usize) -> Option<Lease<'_>> {
        let taken = self.leases.lock().expect("lease table poisoned").insert(repo);
        taken.then(|| Lease { run: self, repo })
    }

    pub fn env_dir(&self) -> PathBuf {
        self.run_dir.join(ENV_DIR)
    }

    pub fn final_dir(&self) -> PathBuf {
        self.run_dir.join(FINAL_DIR)
    }

    fn parts(&self, role: RoleName, vars: &[(&str, &str)], repo: Option<String>) -> Result<ContextParts, PromptError> {
        Ok(ContextParts {
            system: self.prompts.render(role.prompt(), vars)?,
            l1_index: self.l1_index.clone(),
            task: self.task.render(),
            repo,
        })
    }

    fn spec(&self, role: RoleName, repo: Option<usize>) -> AgentSpec {
        AgentSpec {
            role,
            repo_id: repo,
            seq: self.transcripts.next_seq(),
            max_steps: self.config.max_steps.for_role(role),
            context_budget: self.config.context_budget_tokens,
            prompt_version: self.prompts.version(role.prompt()).map(String::from),
        }
    }

    /// A transcript for an invocation that never reached the backend.
    fn failed_before_start(&self, role: RoleName, repo: Option<usize>, error: String) -> AgentTranscript {
        let spec = self.spec(role, repo);
        let now = super::now_ms();
        AgentTranscript {
            role,
            repo_id: repo,
            seq: spec.seq,
            prompt_version: spec.prompt_version,
            started_ms: now,
            ended_ms: now,
            initial_context: Vec::new(),
            steps: Vec::new(),
            outcome: AgentOutcome::Failed,
            final_text: None,
            error: Some(error),
            usage: Default::default(),
        }
    }
}

fn excerpt(path: &Path, cap: usize) -> String {
    match std::fs::read_to_string(path) {
        Ok(text) => head_tail(text.trim_end(), cap / 2, cap / 2).0,
        Err(_) => "(absent)".into(),
    }
}

fn code_listing(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.join(CODE_DIR)];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let (Ok(rel), Ok(meta)) = (p.strip_prefix(root), e.metadata()) {
                out.push(format!("- {} ({} bytes)", rel.display(), meta.len()));
            }
        }
    }
    out.sort();
    out
}

/// What a worker sees about its repository. The header line doubles as a
/// stable marker: `Repository <i> | <role> | status <s>`.
pub fn worker_summary(repo: &SolutionRepository, role: RoleName, instructions: Option<&str>, last_n: usize) -> String {
    let root = repo.root();
    let mut out = format!("Repository {} | {role} | status {}\n", repo.id(), repo.status());
    if let Some(i) = instructions.filter(|s| !s.trim().is_empty()) {
        out.push_str(&format!("Manager instructions: {}\n", i.trim()));
    }
    out.push_str(&format!("\n## {PLAN_FILE}\n{}\n", excerpt(&root.join(PLAN_FILE), PLAN_EXCERPT)));
    out.push_str(&format!("\n## {CONFIG_FILE}\n{}\n", excerpt(&root.join(CONFIG_FILE), CONFIG_EXCERPT)));
    let code = code_listing(root);
    out.push_str(&format!("\n## {CODE_DIR}/\n{}\n", if code.is_empty() { "(empty)".into() } else { code.join("\n") }));
    out.push_str("\n## Results\n");
    match repo.best_metric() {
        Some(m) => out.push_str(&format!("best: {}={}\n", m.metric_name, m.value)),
        None => out.push_str("best: none\n"),
    }
    let results = repo.results();
    for r in results.iter().skip(results.len().saturating_sub(last_n)) {
        out.push_str(&format!("- {}\n", r.one_line()));
    }
    if let Some(last) = results.last().filter(|r| !r.succeeded()) {
        let tail = crate::builders::tail_lines(&root.join(&last.stderr_path), 20).unwrap_or_default();
        if !tail.trim().is_empty() {
            out.push_str(&format!("last failure stderr:\n{tail}\n"));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SetupOutcome {
    pub transcript: AgentTranscript,
    pub env_overrides: Vec<(String, String)>,
    pub warning: Option<String>,
}

/// `EXPORT NAME=value` lines from the setup agent's final text.
pub fn parse_exports(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.trim().strip_prefix("EXPORT "))
        .filter_map(|rest| {
            let (name, value) = rest.split_once('=')?;
            let name = name.trim();
            let valid = !name.is_empty()
                && !name.starts_with(|c: char| c.is_ascii_digit())
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            valid.then(|| (name.to_string(), value.trim().to_string()))
        })
        .collect()
}

/// Never fatal: any failure leaves the overrides empty and a warning.
pub fn run_setup(run: &RunContext, budget: &dyn BudgetView) -> SetupOutcome {
    let env = run.env_dir();
    let mut parts = match run.parts(RoleName::Setup, &[], None) {
        Ok(p) => p,
        Err(e) => {
            let t = run.failed_before_start(RoleName::Setup, None, e.to_string());
            run.transcripts.record(&t);
            return SetupOutcome {
                transcript: t,
                env_overrides: Vec::new(),
                warning: Some(e.to_string()),
            };
        }
    };
    if let Err(e) = std::fs::create_dir_all(&env) {
        log::warn!("cannot create {}: {e}", env.display());
    }
    parts.task.push_str(&format!("\n\nShared environment folder: {}", env.display()));
    let mut tools = Toolset::new(run, RoleName::Setup, None, budget);
    let t = run_agent(&run.spec(RoleName::Setup, None), &parts, &mut tools, &run.client, budget);
    run.transcripts.record(&t);
    let (env_overrides, warning) = match (&t.outcome, &t.final_text) {
        (AgentOutcome::Completed, Some(text)) => (parse_exports(text), None),
        _ => {
            let w = format!(
                "setup ended {}{}; continuing without environment overrides",
                t.outcome,
                t.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
            );
            log::warn!("{w}");
            (Vec::new(), Some(w))
        }
    };
    run.set_env_overrides(env_overrides.clone());
    SetupOutcome {
        transcript: t,
        env_overrides,
        warning,
    }
}

/// Designer, coder, or tuner on one repository. `Err` is a precondition
/// failure; nothing was sent to the backend.
pub fn run_worker(
    run: &RunContext,
    role: RoleName,
    repo_id: usize,
    instructions: Option<&str>,
    budget: &dyn BudgetView,
) -> Result<AgentTranscript, String> {
    if !role.is_worker() {
        return Err(format!("{role} is not a repository worker"));
    }
    let repo = run.repo(repo_id).ok_or_else(|| format!("there is no repository {repo_id}"))?;
    let status = repo.status();
    match (role, status) {
        (_, RepoStatus::Halted) => return Err(format!("precondition: repo-{repo_id} is halted")),
        (RoleName::Coder, RepoStatus::Empty) => {
            return Err(format!("precondition: repo-{repo_id} has no plan yet; invoke the designer first"))
        }
        (RoleName::Tuner, s) if !s.is_coded() => {
            return Err(format!("precondition: repo-{repo_id} is {s}; the tuner needs coded work"))
        }
        _ => {}
    }
    let summary = worker_summary(repo, role, instructions, run.config.summary_results);
    let parts = run.parts(role, &[], Some(summary)).map_err(|e| e.to_string())?;
    let mut tools = Toolset::new(run, role, Some(repo_id), budget);
    let mut t = run_agent(&run.spec(role, Some(repo_id)), &parts, &mut tools, &run.client, budget);

    if t.outcome == AgentOutcome::Completed {
        let unmet = match role {
            RoleName::Designer if !tools.plan_written => Some(format!("finished without writing {PLAN_FILE}")),
            RoleName::Coder => match tools.executions.last() {
                None => Some("finished without a verification run".to_string()),
                Some(r) if !r.succeeded() => Some(format!("last verification run failed ({})", r.one_line())),
                _ => None,
            },
            RoleName::Tuner if tools.executions.is_empty() => Some("finished without running training".to_string()),
            _ => None,
        };
        if let Some(reason) = unmet {
            t.outcome = AgentOutcome::Failed;
            t.error = Some(reason);
        }
    }
    run.transcripts.record(&t);
    Ok(t)
}

pub fn run_manager(run: &RunContext, budget: &dyn BudgetView) -> AgentTranscript {
    let n = run.repos.len().to_string();
    let mut overview = String::from("Repositories overview\n");
    for r in &run.repos {
        overview.push_str(&r.summary(run.config.summary_results));
    }
    let parts = match run.parts(RoleName::Manager, &[("n_repos", &n)], Some(overview)) {
        Ok(p) => p,
        Err(e) => {
            let t = run.failed_before_start(RoleName::Manager, None, e.to_string());
            run.transcripts.record(&t);
            return t;
        }
    };
    let mut tools = Toolset::new(run, RoleName::Manager, None, budget);
    let t = run_agent(&run.spec(RoleName::Manager, None), &parts, &mut tools, &run.client, budget);
    run.transcripts.record(&t);
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Single,
    Blend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub strategy: Strategy,
    pub repos: Vec<usize>,
    /// Blend only, as written by the aggregator (not yet normalized).
    pub weights: Vec<(usize, f64)>,
}

fn repo_number(s: &str) -> Option<usize> {
    s.trim().trim_start_matches("repo-").trim_start_matches("repo").trim().parse().ok()
}

/// The `STRATEGY` / `REPOS` / `WEIGHTS` block that ends the aggregator's reply.
pub fn parse_decision(text: &str) -> Result<Decision, String> {
    let field = |name: &str| {
        text.lines()
            .filter_map(|l| l.trim().strip_prefix(name))
            .filter_map(|rest| rest.trim_start().strip_prefix(':'))
            .last()
            .map(str::trim)
    };
    let strategy = match field("STRATEGY").map(str::to_ascii_lowercase).as_deref() {
        Some("single") => Strategy::Single,
        Some("blend") => Strategy::Blend,
        Some(other) => return Err(format!("unknown STRATEGY `{other}`")),
        None => return Err("missing STRATEGY line".into()),
    };
    let repos: Vec<usize> = field("REPOS")
        .ok_or("missing REPOS line")?
        .split(',')
        .map(|s| repo_number(s).ok_or_else(|| format!("bad repository `{}`", s.trim())))
        .collect::<Result<_, _>>()?;
    if repos.is_empty() {
        return Err("REPOS is empty".into());
    }
    let mut weights = Vec::new();
    if let Some(w) = field("WEIGHTS").filter(|w| !w.is_empty()) {
        for item in w.split(',') {
            let (r, v) = item.split_once('=').ok_or_else(|| format!("bad weight `{}`", item.trim()))?;
            let r = repo_number(r).ok_or_else(|| format!("bad weight repository `{}`", r.trim()))?;
            let v: f64 = v.trim().trim_end_matches('%').parse().map_err(|_| format!("bad weight value `{}`", v.trim()))?;
            weights.push((r, v));
        }
    }
    Ok(Decision { strategy, repos, weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub repo: usize,
    pub metric_name: String,
    pub value: f64,
}

/// `final/manifest.json`: what the aggregator chose and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalManifest {
    pub candidates: Vec<CandidateScore>,
    pub strategy: Option<Strategy>,
    pub repos: Vec<usize>,
    /// `repo-<i>` → weight; sums to 1 for blends, a single 1.0 otherwise.
    pub weights: Vec<(String, f64)>,
    pub blend_score: Option<f64>,
    /// Path of the entry script relative to the final folder, if present.
    pub inference: Option<String>,
    /// `aggregator`, `fallback`, or `none`.
    pub decided_by: String,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AggregateOutcome {
    pub transcript: Option<AgentTranscript>,
    pub manifest: FinalManifest,
}

fn copy_candidate(repo: &SolutionRepository, dst: &Path) -> std::io::Result<()> {
    if dst.exists() {
        std::fs::remove_dir_all(dst)?;
    }
    copy_tree(repo.root(), dst)?;
    for transient in [RESULTS_DIR, ".repo.json"] {
        let p = dst.join(transient);
        if p.is_dir() {
            std::fs::remove_dir_all(&p)?;
        } else if p.exists() {
            std::fs::remove_file(&p)?;
        }
    }
    Ok(())
}

/// Checks a decision against the candidates and resolves blend weights,
/// preferring the exact fit from the blend tool when it covers the same repos.
fn resolve_decision(
    decision: &Decision,
    candidates: &[CandidateScore],
    blend: Option<&super::tools::BlendRecord>,
) -> Result<(Vec<usize>, Vec<(String, f64)>, Option<f64>), String> {
    let allowed: BTreeSet<usize> = candidates.iter().map(|c| c.repo).collect();
    if let Some(bad) = decision.repos.iter().find(|r| !allowed.contains(r)) {
        return Err(format!("repo-{bad} is not a scored candidate"));
    }
    match decision.strategy {
        Strategy::Single => {
            let r = decision.repos[0];
            Ok((vec![r], vec![(format!("repo-{r}"), 1.0)], None))
        }
        Strategy::Blend => {
            let chosen: BTreeSet<usize> = decision.repos.iter().copied().collect();
            if let Some(b) = blend.filter(|b| b.repos.iter().copied().collect::<BTreeSet<_>>() == chosen) {
                let weights: Vec<(String, f64)> =
                    b.fit.weights.weights.iter().filter(|(_, w)| *w > 0.0).cloned().collect();
                let repos = weights.iter().filter_map(|(id, _)| repo_number(id)).collect();
                return Ok((repos, weights, Some(b.fit.score)));
            }
            let total: f64 = decision.weights.iter().map(|(_, w)| *w).sum();
            if decision.weights.is_empty() || !total.is_finite() || total <= 0.0 {
                return Err("blend without usable WEIGHTS".into());
            }
            if decision.weights.iter().any(|(r, w)| !chosen.contains(r) || *w < 0.0) {
                return Err("WEIGHTS name a repository outside REPOS or a negative weight".into());
            }
            let weights = decision.weights.iter().map(|(r, w)| (format!("repo-{r}"), w / total)).collect();
            Ok((decision.repos.clone(), weights, None))
        }
    }
}

/// Picks the final output. With no scored candidate the backend is not
/// called and the manifest records the failure.
pub fn run_aggregator(run: &RunContext, budget: &dyn BudgetView) -> AggregateOutcome {
    let final_dir = run.final_dir();
    let mut notes = Vec::new();
    let candidates: Vec<CandidateScore> = run
        .repos
        .iter()
        .filter(|r| r.status() != RepoStatus::Halted)
        .filter_map(|r| {
            r.best_metric().map(|m| CandidateScore {
                repo: r.id(),
                metric_name: m.metric_name,
                value: m.value,
            })
        })
        .collect();
    let _ = std::fs::create_dir_all(&final_dir);

    let mut manifest = FinalManifest {
        candidates: candidates.clone(),
        strategy: None,
        repos: Vec::new(),
        weights: Vec::new(),
        blend_score: None,
        inference: None,
        decided_by: "none".into(),
        notes: Vec::new(),
    };
    if candidates.is_empty() {
        manifest.notes.push("no scored, non-halted repository; nothing to select".into());
        write_manifest(&final_dir, &manifest);
        return AggregateOutcome {
            transcript: None,
            manifest,
        };
    }

    let artifacts = final_dir.join("artifacts");
    for c in &candidates {
        let repo = run.repo(c.repo).expect("candidates exist");
        if let Err(e) = copy_candidate(repo, &artifacts.join(format!("repo-{}", c.repo))) {
            notes.push(format!("copying repo-{} failed: {e}", c.repo));
        }
    }

    let listing: Vec<String> = candidates
        .iter()
        .map(|c| format!("repo-{} ({}={})", c.repo, c.metric_name, c.value))
        .collect();
    let mut overview = String::from("Candidates for the final output\n");
    for c in &candidates {
        overview.push_str(&run.repo(c.repo).expect("candidates exist").summary(run.config.summary_results));
    }
    let mut tools = Toolset::new(run, RoleName::Aggregator, None, budget);
    let transcript = match run.parts(RoleName::Aggregator, &[("candidates", &listing.join(", "))], Some(overview)) {
        Ok(parts) => run_agent(&run.spec(RoleName::Aggregator, None), &parts, &mut tools, &run.client, budget),
        Err(e) => run.failed_before_start(RoleName::Aggregator, None, e.to_string()),
    };
    run.transcripts.record(&transcript);

    let decided = match (&transcript.outcome, &transcript.final_text) {
        (AgentOutcome::Completed, Some(text)) => {
            parse_decision(text).and_then(|d| resolve_decision(&d, &candidates, tools.blend.as_ref()).map(|r| (d.strategy, r)))
        }
        _ => Err(format!(
            "aggregator ended {}{}",
            transcript.outcome,
            transcript.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
        )),
    };
    let higher = run.task.higher_is_better;
    match decided {
        Ok((strategy, (repos, weights, score))) => {
            manifest.strategy = Some(strategy);
            manifest.repos = repos;
            manifest.weights = weights;
            manifest.blend_score = score;
            manifest.decided_by = "aggregator".into();
        }
        Err(reason) => {
            let best = candidates
                .iter()
                .fold(None::<&CandidateScore>, |best, c| match best {
                    Some(b) if (higher && c.value <= b.value) || (!higher && c.value >= b.value) => Some(b),
                    _ => Some(c),
                })
                .expect("candidates is non-empty");
            notes.push(format!("falling back to the best single repository: {reason}"));
            manifest.strategy = Some(Strategy::Single);
            manifest.repos = vec![best.repo];
            manifest.weights = vec![(format!("repo-{}", best.repo), 1.0)];
            manifest.decided_by = "fallback".into();
        }
    }

    for c in &candidates {
        if !manifest.repos.contains(&c.repo) {
            let _ = std::fs::remove_dir_all(artifacts.join(format!("repo-{}", c.repo)));
        }
    }

    let entry = final_dir.join(FINAL_INFERENCE);
    if !entry.is_file() && manifest.repos.len() == 1 {
        let r = manifest.repos[0];
        if artifacts.join(format!("repo-{r}")).join(FINAL_INFERENCE).is_file() {
            let wrapper = format!(
                "#!/bin/sh\nexec sh \"$(dirname \"$0\")/artifacts/repo-{r}/{FINAL_INFERENCE}\" \"$@\"\n"
            );
            let written = crate::util::atomic_write(&entry, wrapper.as_bytes()).and_then(|_| {
                use std::os::unix::fs::PermissionsExt;
                std::fs::set_permissions(&entry, std::fs::Permissions::from_mode(0o755))
            });
            match written {
                Ok(()) => notes.push(format!("wrote an {FINAL_INFERENCE} wrapper around repo-{r}'s own entry script")),
                Err(e) => notes.push(format!("could not write the {FINAL_INFERENCE} wrapper: {e}")),
            }
        }
    }
    if entry.is_file() {
        manifest.inference = Some(FINAL_INFERENCE.into());
    } else {
        notes.push(format!("no {FINAL_INFERENCE} entry script in the final folder"));
    }
    manifest.notes = notes;
    write_manifest(&final_dir, &manifest);
    AggregateOutcome {
        transcript: Some(transcript),
        manifest,
    }
}

fn write_manifest(final_dir: &Path, manifest: &FinalManifest) {
    let path = final_dir.join(FINAL_MANIFEST);
    if let Err(e) = write_json(&path, manifest) {
        log::warn!("cannot write {}: {e}", path.display());
    }
}
