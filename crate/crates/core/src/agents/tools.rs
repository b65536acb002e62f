//! Tool schemas per role and the handler that executes them.
//!
//! Repository tools carry the repository number in their name
//! (`read_2`, `invoke_coder_3`), so a role only sees the repositories it may
//! touch and anything else is rejected by the loop as unavailable.

use std::fs::File;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::{mpsc, Mutex};
use std::time::Duration;

use serde_json::Value;

use super::roles::{run_worker, RunContext};
use super::{execution, now_ms, query_tool, BudgetView, LoadedKnowledge, RoleName, ToolExecution, ToolHandler, ToolReply};
use crate::builders::tail_lines;
use crate::ensemble::{hill_climb_blend, load_oof, BlendFit, Metric, DEFAULT_ROUNDS};
use crate::llm::{ParamType, ToolCall, ToolParam, ToolSchema};
use crate::workspace::exec::run_shell;
use crate::workspace::{ExecutionResult, CODE_DIR, PLAN_FILE};

/// Default out-of-fold file names looked up in each repository.
pub const BLEND_OOF_FILE: &str = "oof.csv";
pub const BLEND_LABELS_FILE: &str = "oof_labels.csv";

const LOG_TAIL_LINES: usize = 40;
const RESERVED_FINAL: [&str; 2] = ["manifest.json", "report.md"];

fn schema(name: impl Into<String>, description: &str, parameters: Vec<ToolParam>) -> ToolSchema {
    ToolSchema {
        name: name.into(),
        description: description.to_string(),
        parameters,
    }
}

fn query_schema() -> ToolSchema {
    schema(
        "query",
        "Knowledge lookup. With only `key`: the category's instruction and document index. With `key` and `doc_id`: one document (load its category first).",
        vec![
            ToolParam::required("key", ParamType::String, "category key from the index"),
            ToolParam::optional("doc_id", ParamType::String, "document id from the category index"),
        ],
    )
}

fn command_params() -> Vec<ToolParam> {
    vec![
        ToolParam::required("command", ParamType::String, "shell command"),
        ToolParam::optional("timeout_seconds", ParamType::Number, "kill the command after this many seconds"),
    ]
}

fn read_schema(i: usize) -> ToolSchema {
    schema(
        format!("read_{i}"),
        &format!("Read a file (or list a directory) of repository {i}."),
        vec![ToolParam::required("path", ParamType::String, "repository-relative path")],
    )
}

/// The tools a role is offered. `repo` is the worker's own repository.
pub fn tool_schemas(role: RoleName, repo: Option<usize>, n_repos: usize) -> Vec<ToolSchema> {
    let mut out = Vec::new();
    match role {
        RoleName::Setup => {
            out.push(schema(
                "execute_env",
                "Run a shell command in the shared environment folder.",
                command_params(),
            ));
        }
        RoleName::Manager => {
            for i in 1..=n_repos {
                let guidance = || vec![ToolParam::optional("instructions", ParamType::String, "guidance for the sub-agent")];
                out.push(schema(format!("invoke_designer_{i}"), &format!("Design or revise the plan of repository {i}."), guidance()));
                out.push(schema(format!("invoke_coder_{i}"), &format!("Implement the plan of repository {i}."), guidance()));
                out.push(schema(format!("invoke_tuner_{i}"), &format!("Train and tune repository {i}."), guidance()));
                out.push(read_schema(i));
                out.push(schema(
                    format!("halt_{i}"),
                    &format!("Stop repository {i} for good."),
                    vec![ToolParam::required("reason", ParamType::String, "why")],
                ));
            }
        }
        RoleName::Designer | RoleName::Coder | RoleName::Tuner => {
            let i = repo.expect("workers are bound to a repository");
            out.push(read_schema(i));
            out.push(schema(
                format!("write_{i}"),
                &format!("Write a file of repository {i} (plan.md, config.yaml, code/...)."),
                vec![
                    ToolParam::required("path", ParamType::String, "repository-relative path"),
                    ToolParam::required("content", ParamType::String, "full file content"),
                ],
            ));
            out.push(schema(
                format!("execute_{i}"),
                &format!("Run a shell command at the root of repository {i}."),
                command_params(),
            ));
        }
        RoleName::Aggregator => {
            for i in 1..=n_repos {
                out.push(read_schema(i));
            }
            out.push(schema(
                "write_final",
                "Write a file in the final output folder.",
                vec![
                    ToolParam::required("path", ParamType::String, "path relative to the final folder"),
                    ToolParam::required("content", ParamType::String, "full file content"),
                ],
            ));
            out.push(schema("execute_final", "Run a shell command in the final output folder.", command_params()));
            out.push(schema(
                "hill_climb_blend",
                "Fit rank-average blend weights on out-of-fold predictions of several repositories.",
                vec![
                    ToolParam::required("repos", ParamType::Array, "repository numbers"),
                    ToolParam::optional("metric", ParamType::String, "rank_correlation or mean_absolute_error"),
                    ToolParam::optional("rounds", ParamType::Integer, "selection rounds (default 14)"),
                    ToolParam::optional("oof_file", ParamType::String, "per-repo predictions file (default oof.csv)"),
                    ToolParam::optional("labels_file", ParamType::String, "labels file in the first repo (default oof_labels.csv)"),
                ],
            ));
        }
    }
    out.push(query_schema());
    out
}

/// `invoke_coder_3` → `("invoke_coder", 3)`.
pub fn parse_repo_tool(name: &str) -> Option<(&str, usize)> {
    let (base, num) = name.rsplit_once('_')?;
    let i: usize = num.parse().ok()?;
    matches!(base, "read" | "write" | "execute" | "halt" | "invoke_designer" | "invoke_coder" | "invoke_tuner")
        .then_some((base, i))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendRecord {
    pub repos: Vec<usize>,
    pub fit: BlendFit,
}

/// One invocation's tools plus what it did with them.
pub struct Toolset<'a> {
    run: &'a RunContext,
    role: RoleName,
    repo: Option<usize>,
    budget: &'a dyn BudgetView,
    pub loaded: LoadedKnowledge,
    pub plan_written: bool,
    pub code_written: bool,
    pub executions: Vec<ExecutionResult>,
    pub blend: Option<BlendRecord>,
}

fn arg_str<'c>(call: &'c ToolCall, name: &str) -> Result<&'c str, ToolReply> {
    call.arg_str(name)
        .ok_or_else(|| ToolReply::error(format!("`{}` needs a string argument `{name}`", call.name)))
}

fn relative_ok(path: &str) -> Result<(), String> {
    let p = Path::new(path);
    if path.trim().is_empty() || p.is_absolute() {
        return Err(format!("path `{path}` must be relative"));
    }
    if p.components().any(|c| matches!(c, Component::ParentDir)) {
        return Err(format!("path `{path}` leaves the folder"));
    }
    Ok(())
}

fn render_logs(dir: &Path, stdout: &str, stderr: &str) -> String {
    let mut out = String::new();
    for (label, rel) in [("stdout", stdout), ("stderr", stderr)] {
        let tail = tail_lines(&dir.join(rel), LOG_TAIL_LINES).unwrap_or_default();
        if !tail.trim().is_empty() {
            out.push_str(&format!("--- {label} (last {LOG_TAIL_LINES} lines) ---\n{tail}\n"));
        }
    }
    out
}

impl<'a> Toolset<'a> {
    pub fn new(run: &'a RunContext, role: RoleName, repo: Option<usize>, budget: &'a dyn BudgetView) -> Self {
        Self {
            run,
            role,
            repo,
            budget,
            loaded: LoadedKnowledge::default(),
            plan_written: false,
            code_written: false,
            executions: Vec::new(),
            blend: None,
        }
    }

    fn timeout(&self, call: &ToolCall) -> Duration {
        let cap = self.run.config.execute_timeout;
        let requested = call
            .args
            .get("timeout_seconds")
            .and_then(Value::as_f64)
            .filter(|s| s.is_finite() && *s > 0.0)
            .map(Duration::from_secs_f64)
            .unwrap_or(cap)
            .min(cap);
        match self.budget.remaining() {
            Some(left) => requested.min(left.max(Duration::from_secs(1))),
            None => requested,
        }
    }

    fn repo_tool(&mut self, base: &str, i: usize, call: &ToolCall) -> ToolReply {
        let Some(repo) = self.run.repo(i) else {
            return ToolReply::error(format!("there is no repository {i}"));
        };
        match base {
            "read" => {
                let path = match arg_str(call, "path") {
                    Ok(p) => p,
                    Err(e) => return e,
                };
                match repo.read_artifact(path) {
                    Ok(out) => ToolReply::ok(format!(
                        "repo-{i}/{path}{}:\n{}",
                        if out.truncated { " (truncated)" } else { "" },
                        out.text
                    )),
                    Err(e) => ToolReply::error(format!("repo-{i}: {e}")),
                }
            }
            "write" => {
                let (path, content) = match (arg_str(call, "path"), arg_str(call, "content")) {
                    (Ok(p), Ok(c)) => (p, c),
                    (Err(e), _) | (_, Err(e)) => return e,
                };
                match repo.write_artifact(path, content) {
                    Ok(()) => {
                        let norm = path.trim_start_matches("./");
                        self.plan_written |= norm == PLAN_FILE;
                        self.code_written |= norm.starts_with(&format!("{CODE_DIR}/"));
                        ToolReply::ok(format!(
                            "repo-{i}: wrote {path} ({} bytes); status {}",
                            content.len(),
                            repo.status()
                        ))
                    }
                    Err(e) => ToolReply::error(format!("repo-{i}: {e}")),
                }
            }
            "execute" => {
                let command = match arg_str(call, "command") {
                    Ok(c) => c,
                    Err(e) => return e,
                };
                let timeout = self.timeout(call);
                match repo.execute(command, timeout, &self.run.env_overrides()) {
                    Ok(result) => {
                        let best = repo
                            .best_metric()
                            .map_or("none".to_string(), |m| format!("{}={}", m.metric_name, m.value));
                        let mut text = format!("repo-{i} {}\nbest so far: {best}\n", result.one_line());
                        if let Some(w) = &result.metrics_warning {
                            text.push_str(&format!("warning: {w}\n"));
                        }
                        text.push_str(&render_logs(repo.root(), &result.stdout_path, &result.stderr_path));
                        self.executions.push(result);
                        ToolReply::ok(text)
                    }
                    Err(e) => ToolReply::error(format!("repo-{i}: {e}")),
                }
            }
            "halt" => {
                let reason = call.arg_str("reason").unwrap_or("halted by the manager");
                match repo.halt(reason) {
                    Ok(()) => ToolReply::ok(format!("repo-{i} halted: {reason}")),
                    Err(e) => ToolReply::error(format!("repo-{i}: {e}")),
                }
            }
            other => ToolReply::error(format!("`{other}` must be issued as a sub-agent invocation")),
        }
    }

    fn shell_in(&self, dir: &Path, log_dir: &Path, prefix: &str, call: &ToolCall) -> ToolReply {
        let command = match arg_str(call, "command") {
            Ok(c) => c,
            Err(e) => return e,
        };
        let seq = now_ms();
        let (out_path, err_path) = (log_dir.join(format!("{prefix}-{seq}.out")), log_dir.join(format!("{prefix}-{seq}.err")));
        let files = std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::create_dir_all(log_dir))
            .and_then(|_| Ok((File::create(&out_path)?, File::create(&err_path)?)));
        let (stdout, stderr) = match files {
            Ok(f) => f,
            Err(e) => return ToolReply::error(format!("cannot prepare logs: {e}")),
        };
        let running = Mutex::new(None);
        let cancel = AtomicBool::new(false);
        let timeout = self.timeout(call);
        match run_shell(command, dir, &self.run.env_overrides(), stdout, stderr, timeout, &running, &cancel) {
            Ok(f) => {
                let mut text = format!(
                    "{prefix} exit={}{} {:.1}s :: {command}\n",
                    f.exit_code,
                    if f.timed_out { " timed-out" } else { "" },
                    f.duration.as_secs_f64()
                );
                text.push_str(&render_logs(log_dir, &format!("{prefix}-{seq}.out"), &format!("{prefix}-{seq}.err")));
                ToolReply::ok(text)
            }
            Err(e) => ToolReply::error(format!("could not start command: {e}")),
        }
    }

    fn write_final(&self, call: &ToolCall) -> ToolReply {
        let (path, content) = match (arg_str(call, "path"), arg_str(call, "content")) {
            (Ok(p), Ok(c)) => (p, c),
            (Err(e), _) | (_, Err(e)) => return e,
        };
        if let Err(e) = relative_ok(path) {
            return ToolReply::error(e);
        }
        let norm = path.trim_start_matches("./");
        if RESERVED_FINAL.contains(&norm) {
            return ToolReply::error(format!("`{norm}` is written by the harness"));
        }
        let target = self.run.final_dir().join(norm);
        let written = crate::util::atomic_write(&target, content.as_bytes()).and_then(|_| {
            if norm == super::FINAL_INFERENCE || content.starts_with("#!") {
                use std::os::unix::fs::PermissionsExt;
                std::fs::set_permissions(&target, std::fs::Permissions::from_mode(0o755))?;
            }
            Ok(())
        });
        match written {
            Ok(()) => ToolReply::ok(format!("final: wrote {norm} ({} bytes)", content.len())),
            Err(e) => ToolReply::error(format!("final: {e}")),
        }
    }

    fn blend_tool(&mut self, call: &ToolCall) -> ToolReply {
        let repos: Vec<usize> = match call.args.get("repos").and_then(Value::as_array) {
            Some(a) => a.iter().filter_map(|v| v.as_u64().map(|n| n as usize)).collect(),
            None => return ToolReply::error("hill_climb_blend needs `repos`: an array of repository numbers"),
        };
        if repos.is_empty() {
            return ToolReply::error("`repos` is empty");
        }
        let metric = match call.arg_str("metric") {
            Some(m) => match m.parse::<Metric>() {
                Ok(m) => m,
                Err(e) => return ToolReply::error(e.to_string()),
            },
            None => self.run.task.default_blend_metric(),
        };
        let rounds = call.args.get("rounds").and_then(Value::as_u64).map_or(DEFAULT_ROUNDS, |r| r as usize);
        let oof_file = call.arg_str("oof_file").unwrap_or(BLEND_OOF_FILE);
        let labels_file = call.arg_str("labels_file").unwrap_or(BLEND_LABELS_FILE);
        let mut models = Vec::new();
        for &i in &repos {
            let Some(repo) = self.run.repo(i) else {
                return ToolReply::error(format!("there is no repository {i}"));
            };
            match repo.resolve(oof_file) {
                Ok(p) => models.push((format!("repo-{i}"), p)),
                Err(e) => return ToolReply::error(format!("repo-{i}: {e}")),
            }
        }
        let labels: PathBuf = match self.run.repo(repos[0]).map(|r| r.resolve(labels_file)) {
            Some(Ok(p)) => p,
            Some(Err(e)) => return ToolReply::error(e.to_string()),
            None => unreachable!("checked above"),
        };
        let fit = match load_oof(&models, &labels).and_then(|m| hill_climb_blend(&m, metric, rounds)) {
            Ok(f) => f,
            Err(e) => return ToolReply::error(e.to_string()),
        };
        let mut text = format!(
            "blend ({}, {} rounds): score {:.6}; best single {} {:.6}\nweights:\n",
            fit.metric.name(),
            fit.rounds,
            fit.score,
            fit.best_single.0,
            fit.best_single.1
        );
        for ((id, w), c) in fit.weights.weights.iter().zip(&fit.counts) {
            text.push_str(&format!("  {id} = {w:.6} ({c}/{})\n", fit.rounds));
        }
        self.blend = Some(BlendRecord { repos, fit });
        ToolReply::ok(text)
    }

    fn invoke_result(&self, role: RoleName, i: usize, result: Result<super::AgentTranscript, String>) -> ToolReply {
        let repo = self.run.repo(i).expect("invoked repos exist");
        match result {
            Ok(t) => {
                let best = repo
                    .best_metric()
                    .map_or("none".to_string(), |m| format!("{}={}", m.metric_name, m.value));
                let summary = crate::util::truncate_chars(t.final_text.as_deref().unwrap_or(""), 2_000);
                let mut text = format!(
                    "repo-{i} {role}: {} after {} step(s), {:.1}s\nstatus: {}; best metric: {best}\n",
                    t.outcome,
                    t.steps.len(),
                    (t.ended_ms - t.started_ms) as f64 / 1000.0,
                    repo.status()
                );
                if let Some(e) = &t.error {
                    text.push_str(&format!("error: {e}\n"));
                }
                if !summary.is_empty() {
                    text.push_str(&format!("summary: {summary}\n"));
                }
                ToolReply::ok(text)
            }
            Err(e) => ToolReply::error(format!("repo-{i} {role}: {e}")),
        }
    }

    /// Manager batches: plain calls run in order, sub-agent invocations run
    /// concurrently, each holding its repository's lease.
    fn manager_batch(&mut self, calls: &[ToolCall]) -> Vec<ToolExecution> {
        let mut done = Vec::with_capacity(calls.len());
        let mut invocations = Vec::new();
        for call in calls {
            match parse_repo_tool(&call.name) {
                Some((base, i)) if base.starts_with("invoke_") => invocations.push((call, base, i)),
                _ => {
                    let t = now_ms();
                    let reply = self.handle(call);
                    done.push(execution(call, reply, t));
                }
            }
        }
        if invocations.is_empty() {
            return done;
        }
        let run = self.run;
        let budget = self.budget;
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|scope| {
            for (call, base, i) in invocations {
                let started = now_ms();
                let role = match base {
                    "invoke_designer" => RoleName::Designer,
                    "invoke_coder" => RoleName::Coder,
                    _ => RoleName::Tuner,
                };
                if run.repo(i).is_none() {
                    done.push(execution(call, ToolReply::error(format!("there is no repository {i}")), started));
                    continue;
                }
                let Some(lease) = run.try_lease(i) else {
                    let reply = ToolReply::error(format!("repo-{i} is busy with another sub-agent; try again later"));
                    done.push(execution(call, reply, started));
                    continue;
                };
                let tx = tx.clone();
                scope.spawn(move || {
                    let instructions = call.arg_str("instructions");
                    let result = run_worker(run, role, i, instructions, budget);
                    drop(lease);
                    let _ = tx.send((call, role, i, started, result));
                });
            }
            drop(tx);
            for (call, role, i, started, result) in rx {
                let reply = self.invoke_result(role, i, result);
                done.push(execution(call, reply, started));
            }
        });
        done
    }
}

impl ToolHandler for Toolset<'_> {
    fn schemas(&self) -> Vec<ToolSchema> {
        tool_schemas(self.role, self.repo, self.run.repos.len())
    }

    fn handle(&mut self, call: &ToolCall) -> ToolReply {
        match call.name.as_str() {
            "query" => query_tool(&self.run.kb, &mut self.loaded, &call.args),
            "execute_env" => {
                let env = self.run.env_dir();
                self.shell_in(&env, &env.join("logs"), "env", call)
            }
            "write_final" => self.write_final(call),
            "execute_final" => {
                let logs = self.run.run_dir.join("aggregator_logs");
                self.shell_in(&self.run.final_dir(), &logs, "final", call)
            }
            "hill_climb_blend" => self.blend_tool(call),
            name => match parse_repo_tool(name) {
                Some((base, _)) if base.starts_with("invoke_") => {
                    self.manager_batch(std::slice::from_ref(call)).pop().map_or_else(
                        || ToolReply::error("invocation produced no result"),
                        |x| ToolReply {
                            content: x.result,
                            is_error: x.is_error,
                        },
                    )
                }
                Some((base, i)) => self.repo_tool(base, i, call),
                None => ToolReply::error(format!("unknown tool `{name}`")),
            },
        }
    }

    fn handle_batch(&mut self, calls: &[ToolCall]) -> Vec<ToolExecution> {
        if self.role == RoleName::Manager {
            return self.manager_batch(calls);
        }
        calls
            .iter()
            .map(|call| {
                let t = now_ms();
                let reply = self.handle(call);
                execution(call, reply, t)
            })
            .collect()
    }

    fn should_stop(&self) -> Option<super::AgentOutcome> {
        let all_halted = self
            .run
            .repos
            .iter()
            .all(|r| r.status() == crate::workspace::RepoStatus::Halted);
        (self.role == RoleName::Manager && all_halted).then_some(super::AgentOutcome::NoCandidates)
    }
}
