//! Solution repositories: the `(plan, code, config, result)` schema, path
//! confinement and the read/write/execute primitives.

pub(crate) mod exec;

use std::fmt;
use std::fs::File;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use exec::KILLED_EXIT_CODE;

use crate::util::{atomic_write, head_tail, write_json};

pub const PLAN_FILE: &str = "plan.md";
pub const CONFIG_FILE: &str = "config.yaml";
pub const CODE_DIR: &str = "code";
pub const RESULTS_DIR: &str = "results";
pub const METRICS_FILE: &str = "metrics.json";
const INDEX_FILE: &str = "results/index.json";
const STATE_FILE: &str = ".repo.json";

pub const READ_HEAD_CHARS: usize = 48_000;
pub const READ_TAIL_CHARS: usize = 16_000;

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("path `{path}` rejected: {reason}")]
    Security { path: String, reason: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("repo-{repo}: {message}")]
    State { repo: usize, message: String },
    #[error("repository already exists at {0}")]
    Collision(PathBuf),
    #[error("could not start command: {0}")]
    Spawn(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T, E = WorkspaceError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepoStatus {
    Empty,
    Planned,
    Coded,
    Running,
    Scored,
    Halted,
}

impl RepoStatus {
    /// The allowed transition relation. A run that ends without metrics
    /// returns a never-scored repo to `coded`.
    pub fn may_become(self, next: RepoStatus) -> bool {
        use RepoStatus::*;
        matches!(
            (self, next),
            (Empty, Planned)
                | (Planned, Coded)
                | (Coded, Running)
                | (Running, Scored)
                | (Running, Coded)
                | (Scored, Running)
        ) || (self != Halted && next == Halted)
    }

    pub fn is_coded(self) -> bool {
        matches!(self, RepoStatus::Coded | RepoStatus::Running | RepoStatus::Scored)
    }
}

impl fmt::Display for RepoStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("status serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric_name: String,
    pub value: f64,
    pub higher_is_better: bool,
    pub split: Split,
}

impl MetricRecord {
    pub fn parse(text: &str) -> Result<Self, String> {
        let record: MetricRecord = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if !record.value.is_finite() {
            return Err(format!("metric value {} is not finite", record.value));
        }
        Ok(record)
    }

    pub fn beats(&self, other: &MetricRecord) -> bool {
        if self.higher_is_better {
            self.value > other.value
        } else {
            self.value < other.value
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub run_id: String,
    pub command: String,
    pub exit_code: i32,
    pub duration_seconds: f64,
    /// Repo-relative log paths.
    pub stdout_path: String,
    pub stderr_path: String,
    pub timed_out: bool,
    #[serde(default)]
    pub killed: bool,
    pub parsed_metrics: Option<MetricRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_warning: Option<String>,
    pub started_at: DateTime<Utc>,
}

impl ExecutionResult {
    pub fn succeeded(&self) -> bool {
        self.exit_code == 0 && !self.timed_out && !self.killed
    }

    pub fn one_line(&self) -> String {
        let metric = match &self.parsed_metrics {
            Some(m) => format!("{}={} ({:?})", m.metric_name, m.value, m.split),
            None => "no metrics".into(),
        };
        format!(
            "{} exit={}{} {:.1}s {} :: {}",
            self.run_id,
            self.exit_code,
            if self.timed_out { " timed-out" } else { "" },
            self.duration_seconds,
            metric,
            self.command
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: RepoStatus,
    pub to: RepoStatus,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RepoState {
    repo_id: usize,
    status: RepoStatus,
    halt_reason: Option<String>,
    transitions: Vec<Transition>,
    next_run: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadOutput {
    pub text: String,
    pub truncated: bool,
}

pub fn repo_dir(run_root: &Path, repo_id: usize) -> PathBuf {
    run_root.join(format!("repo-{repo_id}"))
}

/// One sandboxed candidate solution. Shared between threads; mutations of
/// the state and the result log serialize internally.
#[derive(Debug)]
pub struct SolutionRepository {
    id: usize,
    root: PathBuf,
    state: Mutex<RepoState>,
    results: Mutex<Vec<ExecutionResult>>,
    running: Mutex<Option<i32>>,
    cancel: AtomicBool,
}

impl SolutionRepository {
    pub fn create(run_root: &Path, repo_id: usize) -> Result<Self> {
        let dir = repo_dir(run_root, repo_id);
        if dir.exists() {
            return Err(WorkspaceError::Collision(dir));
        }
        std::fs::create_dir_all(run_root).map_err(io_err(run_root))?;
        std::fs::create_dir(&dir).map_err(io_err(&dir))?;
        let root = dir.canonicalize().map_err(io_err(&dir))?;
        for sub in [CODE_DIR, RESULTS_DIR] {
            std::fs::create_dir(root.join(sub)).map_err(io_err(&root))?;
        }
        for file in [PLAN_FILE, CONFIG_FILE] {
            std::fs::write(root.join(file), "").map_err(io_err(&root))?;
        }
        let repo = Self::from_parts(
            repo_id,
            root,
            RepoState {
                repo_id,
                status: RepoStatus::Empty,
                halt_reason: None,
                transitions: Vec::new(),
                next_run: 1,
            },
            Vec::new(),
        );
        repo.persist_state(&repo.state.lock().expect("state poisoned"))?;
        repo.persist_results(&[])?;
        Ok(repo)
    }

    pub fn open(run_root: &Path, repo_id: usize) -> Result<Self> {
        let dir = repo_dir(run_root, repo_id);
        let root = dir.canonicalize().map_err(|_| WorkspaceError::NotFound(dir.display().to_string()))?;
        let state: RepoState = read_json(&root.join(STATE_FILE))?;
        let results: Vec<ExecutionResult> = read_json(&root.join(INDEX_FILE))?;
        Ok(Self::from_parts(repo_id, root, state, results))
    }

    fn from_parts(id: usize, root: PathBuf, state: RepoState, results: Vec<ExecutionResult>) -> Self {
        Self {
            id,
            root,
            state: Mutex::new(state),
            results: Mutex::new(results),
            running: Mutex::new(None),
            cancel: AtomicBool::new(false),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn status(&self) -> RepoStatus {
        self.state.lock().expect("state poisoned").status
    }

    pub fn halt_reason(&self) -> Option<String> {
        self.state.lock().expect("state poisoned").halt_reason.clone()
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.state.lock().expect("state poisoned").transitions.clone()
    }

    pub fn results(&self) -> Vec<ExecutionResult> {
        self.results.lock().expect("results poisoned").clone()
    }

    fn state_err(&self, message: impl Into<String>) -> WorkspaceError {
        WorkspaceError::State {
            repo: self.id,
            message: message.into(),
        }
    }

    fn persist_state(&self, state: &RepoState) -> Result<()> {
        let path = self.root.join(STATE_FILE);
        write_json(&path, state).map_err(io_err(&path))
    }

    fn persist_results(&self, results: &[ExecutionResult]) -> Result<()> {
        let path = self.root.join(INDEX_FILE);
        write_json(&path, &results).map_err(io_err(&path))
    }

    fn transition(&self, state: &mut RepoState, to: RepoStatus) -> Result<()> {
        if state.status == to {
            return Ok(());
        }
        if !state.status.may_become(to) {
            return Err(self.state_err(format!("illegal transition {} -> {to}", state.status)));
        }
        state.transitions.push(Transition {
            from: state.status,
            to,
            at: Utc::now(),
        });
        state.status = to;
        self.persist_state(state)
    }

    /// Maps a repo-relative path to an absolute path inside the root. Rejects
    /// absolute paths, `..` components and symlinks that lead outside.
    pub fn resolve(&self, relative: &str) -> Result<PathBuf> {
        let reject = |reason: &str| WorkspaceError::Security {
            path: relative.to_string(),
            reason: reason.to_string(),
        };
        let rel = Path::new(relative);
        if relative.is_empty() {
            return Err(reject("empty path"));
        }
        if rel.is_absolute() {
            return Err(reject("absolute paths are not allowed"));
        }
        if rel
            .components()
            .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
        {
            return Err(reject("path leaves the repository"));
        }
        let joined = self.root.join(rel);
        // the deepest existing ancestor decides where symlinks really lead
        let mut probe = joined.as_path();
        loop {
            if probe.symlink_metadata().is_ok() {
                let real = probe.canonicalize().map_err(|_| reject("dangling symlink"))?;
                if !real.starts_with(&self.root) {
                    return Err(reject("symlink escapes the repository"));
                }
                break;
            }
            probe = probe.parent().ok_or_else(|| reject("no existing ancestor"))?;
        }
        Ok(joined)
    }

    pub fn read_artifact(&self, relative: &str) -> Result<ReadOutput> {
        let path = self.resolve(relative)?;
        if path.is_dir() {
            let mut names: Vec<String> = std::fs::read_dir(&path)
                .map_err(io_err(&path))?
                .filter_map(|e| e.ok())
                .map(|e| {
                    let mut name = e.file_name().to_string_lossy().into_owned();
                    if e.path().is_dir() {
                        name.push('/');
                    }
                    name
                })
                .collect();
            names.sort();
            return Ok(ReadOutput {
                text: names.join("\n"),
                truncated: false,
            });
        }
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(WorkspaceError::NotFound(relative.to_string()))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let (text, truncated) = head_tail(&String::from_utf8_lossy(&bytes), READ_HEAD_CHARS, READ_TAIL_CHARS);
        Ok(ReadOutput { text, truncated })
    }

    pub fn write_artifact(&self, relative: &str, content: &str) -> Result<()> {
        let path = self.resolve(relative)?;
        let rel = Path::new(relative);
        if rel.starts_with(RESULTS_DIR) || rel == Path::new(STATE_FILE) {
            return Err(WorkspaceError::Security {
                path: relative.to_string(),
                reason: "reserved for the harness".into(),
            });
        }
        let mut state = self.state.lock().expect("state poisoned");
        if state.status == RepoStatus::Halted {
            return Err(self.state_err("repository is halted"));
        }
        atomic_write(&path, content.as_bytes()).map_err(io_err(&path))?;
        if rel == Path::new(PLAN_FILE) && state.status == RepoStatus::Empty {
            self.transition(&mut state, RepoStatus::Planned)?;
        } else if rel.starts_with(CODE_DIR) && state.status == RepoStatus::Planned {
            self.transition(&mut state, RepoStatus::Coded)?;
        }
        Ok(())
    }

    /// Runs `sh -c command` with the repo root as working directory. Logs
    /// go to `results/<run_id>.out|.err`; a `metrics.json` left behind by
    /// the command is parsed into the result.
    pub fn execute(
        &self,
        command: &str,
        timeout: Duration,
        env_overrides: &[(String, String)],
    ) -> Result<ExecutionResult> {
        if command.trim().is_empty() {
            return Err(self.state_err("empty command"));
        }
        let run_id = {
            let mut state = self.state.lock().expect("state poisoned");
            if state.status == RepoStatus::Halted {
                return Err(self.state_err("repository is halted"));
            }
            if !state.status.is_coded() {
                return Err(self.state_err(format!("cannot execute in status {}", state.status)));
            }
            let run_id = format!("run-{:04}", state.next_run);
            state.next_run += 1;
            self.transition(&mut state, RepoStatus::Running)?;
            run_id
        };

        let metrics_path = self.root.join(METRICS_FILE);
        if metrics_path.exists() {
            std::fs::remove_file(&metrics_path).map_err(io_err(&metrics_path))?;
        }
        let stdout_rel = format!("{RESULTS_DIR}/{run_id}.out");
        let stderr_rel = format!("{RESULTS_DIR}/{run_id}.err");
        let stdout_path = self.root.join(&stdout_rel);
        let stderr_path = self.root.join(&stderr_rel);
        let stdout = File::create(&stdout_path).map_err(io_err(&stdout_path))?;
        let stderr = File::create(&stderr_path).map_err(io_err(&stderr_path))?;
        let started_at = Utc::now();

        let finished = match exec::run_shell(
            command,
            &self.root,
            env_overrides,
            stdout,
            stderr,
            timeout,
            &self.running,
            &self.cancel,
        ) {
            Ok(f) => f,
            Err(e) => {
                let mut state = self.state.lock().expect("state poisoned");
                let back = if self.best_metric().is_some() {
                    RepoStatus::Scored
                } else {
                    RepoStatus::Coded
                };
                if state.status == RepoStatus::Running {
                    self.transition(&mut state, back)?;
                }
                return Err(WorkspaceError::Spawn(e.to_string()));
            }
        };

        let (parsed_metrics, metrics_warning) = match std::fs::read_to_string(&metrics_path) {
            Ok(text) => match MetricRecord::parse(&text) {
                Ok(m) => (Some(m), None),
                Err(e) => {
                    log::warn!("repo-{} {run_id}: unparseable {METRICS_FILE}: {e}", self.id);
                    (None, Some(format!("unparseable {METRICS_FILE}: {e}")))
                }
            },
            Err(_) => (None, None),
        };
        let result = ExecutionResult {
            run_id,
            command: command.to_string(),
            exit_code: finished.exit_code,
            duration_seconds: finished.duration.as_secs_f64(),
            stdout_path: stdout_rel,
            stderr_path: stderr_rel,
            timed_out: finished.timed_out,
            killed: finished.killed,
            parsed_metrics,
            metrics_warning,
            started_at,
        };

        let mut state = self.state.lock().expect("state poisoned");
        {
            let mut results = self.results.lock().expect("results poisoned");
            results.push(result.clone());
            self.persist_results(&results)?;
        }
        if state.status == RepoStatus::Running {
            let next = if self.best_metric().is_some() {
                RepoStatus::Scored
            } else {
                RepoStatus::Coded
            };
            self.transition(&mut state, next)?;
        }
        Ok(result)
    }

    /// Best validation metric over successful runs.
    pub fn best_metric(&self) -> Option<MetricRecord> {
        let results = self.results.lock().expect("results poisoned");
        let mut best: Option<&MetricRecord> = None;
        for r in results.iter().filter(|r| r.succeeded()) {
            if let Some(m) = r.parsed_metrics.as_ref().filter(|m| m.split == Split::Validation) {
                if best.is_none_or(|b| m.beats(b)) {
                    best = Some(m);
                }
            }
        }
        best.cloned()
    }

    /// Terminal. Kills whatever this repository is running.
    pub fn halt(&self, reason: &str) -> Result<()> {
        let mut state = self.state.lock().expect("state poisoned");
        if state.status == RepoStatus::Halted {
            return Err(self.state_err("already halted"));
        }
        state.halt_reason = Some(reason.to_string());
        self.transition(&mut state, RepoStatus::Halted)?;
        self.cancel.store(true, std::sync::atomic::Ordering::SeqCst);
        if let Some(pgid) = *self.running.lock().expect("pgid lock poisoned") {
            exec::kill_group(pgid);
        }
        Ok(())
    }

    /// Plan headline plus the last `last_n` results, for manager context.
    pub fn summary(&self, last_n: usize) -> String {
        let plan = std::fs::read_to_string(self.root.join(PLAN_FILE)).unwrap_or_default();
        let mut lines = plan.lines().map(str::trim).filter(|l| !l.is_empty());
        let first = lines.clone().next();
        // a markdown title says less than the first line of content
        let headline = lines.find(|l| !l.starts_with('#')).or(first).unwrap_or("(no plan)");
        let mut out = format!("repo-{} [{}] plan: {}\n", self.id, self.status(), headline.trim());
        if let Some(reason) = self.halt_reason() {
            out.push_str(&format!("  halted: {reason}\n"));
        }
        match self.best_metric() {
            Some(m) => out.push_str(&format!("  best: {}={}\n", m.metric_name, m.value)),
            None => out.push_str("  best: none\n"),
        }
        let results = self.results();
        for r in results.iter().skip(results.len().saturating_sub(last_n)) {
            out.push_str(&format!("  {}\n", r.one_line()));
        }
        out
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| WorkspaceError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Copies a directory tree, skipping symlinks.
pub fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dst)?;
    for entry in std::fs::read_dir(src)? {
        let entry = entry?;
        let kind = entry.file_type()?;
        let target = dst.join(entry.file_name());
        if kind.is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else if kind.is_file() {
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::time::Instant;

    fn coded_repo(dir: &Path) -> SolutionRepository {
        let repo = SolutionRepository::create(dir, 1).unwrap();
        repo.write_artifact("plan.md", "# plan").unwrap();
        repo.write_artifact("code/main.sh", "echo hi").unwrap();
        repo
    }

    #[test]
    fn seven_repos_start_empty() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=7 {
            let repo = SolutionRepository::create(dir.path(), i).unwrap();
            assert_eq!(repo.status(), RepoStatus::Empty);
            assert!(repo.resolve("plan.md").is_ok());
        }
        assert!(dir.path().join("repo-7/code").is_dir());
        assert!(matches!(
            SolutionRepository::create(dir.path(), 3),
            Err(WorkspaceError::Collision(_))
        ));
    }

    #[test]
    fn confinement_rejects_traversal_absolute_and_symlinks() {
        let dir = tempfile::tempdir().unwrap();
        let repo = SolutionRepository::create(dir.path(), 1).unwrap();
        SolutionRepository::create(dir.path(), 2).unwrap();
        for bad in ["../repo-2/plan.md", "/etc/passwd", "code/../../repo-2/plan.md", ""] {
            assert!(matches!(repo.read_artifact(bad), Err(WorkspaceError::Security { .. })), "{bad}");
        }
        std::os::unix::fs::symlink(dir.path().join("repo-2"), repo.root().join("code/link")).unwrap();
        assert!(matches!(
            repo.write_artifact("code/link/plan.md", "x"),
            Err(WorkspaceError::Security { .. })
        ));
        assert!(matches!(
            repo.write_artifact("results/index.json", "[]"),
            Err(WorkspaceError::Security { .. })
        ));
    }

    #[test]
    fn writes_drive_status_and_reads_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let repo = SolutionRepository::create(dir.path(), 1).unwrap();
        repo.write_artifact("code/early.py", "x").unwrap();
        assert_eq!(repo.status(), RepoStatus::Empty);
        repo.write_artifact("plan.md", "use trees").unwrap();
        assert_eq!(repo.status(), RepoStatus::Planned);
        assert_eq!(repo.read_artifact("plan.md").unwrap().text, "use trees");
        repo.write_artifact("code/deep/train.py", "print(1)").unwrap();
        assert_eq!(repo.status(), RepoStatus::Coded);
        assert!(matches!(repo.read_artifact("nope.txt"), Err(WorkspaceError::NotFound(_))));
    }

    #[test]
    fn large_reads_are_head_tail_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let repo = SolutionRepository::create(dir.path(), 1).unwrap();
        let big = "x".repeat(1_000_000);
        repo.write_artifact("big.log", &big).unwrap();
        let out = repo.read_artifact("big.log").unwrap();
        assert!(out.truncated);
        assert!(out.text.contains(&format!("[... {} characters elided ...]", 1_000_000 - 64_000)));
        assert!(out.text.chars().filter(|c| *c == 'x').count() == 64_000);
    }

    #[test]
    fn execute_captures_output_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let repo = coded_repo(dir.path());
        assert!(matches!(
            SolutionRepository::create(dir.path(), 2).unwrap().execute("true", Duration::from_secs(5), &[]),
            Err(WorkspaceError::State { .. })
        ));
        let r = repo.execute("echo hello", Duration::from_secs(5), &[]).unwrap();
        assert_eq!(r.exit_code, 0);
        assert!(repo.read_artifact(&r.stdout_path).unwrap().text.contains("hello"));
        assert_eq!(repo.status(), RepoStatus::Coded);

        let write = r#"printf '{"metric_name":"auc","value":0.9,"higher_is_better":true,"split":"validation"}' > metrics.json"#;
        let r = repo.execute(write, Duration::from_secs(5), &[]).unwrap();
        assert_eq!(r.parsed_metrics.as_ref().unwrap().value, 0.9);
        assert_eq!(repo.status(), RepoStatus::Scored);

        let r = repo.execute("echo '{bad' > metrics.json", Duration::from_secs(5), &[]).unwrap();
        assert!(r.parsed_metrics.is_none() && r.metrics_warning.is_some());
        assert_eq!(repo.results().len(), 3);
        let reopened = SolutionRepository::open(dir.path(), 1).unwrap();
        assert_eq!(reopened.results(), repo.results());
        assert_eq!(reopened.status(), RepoStatus::Scored);
    }

    #[test]
    fn env_overrides_reach_the_command() {
        let dir = tempfile::tempdir().unwrap();
        let repo = coded_repo(dir.path());
        let env = vec![("KB_PROBE".to_string(), "seen".to_string())];
        let r = repo.execute("echo $KB_PROBE", Duration::from_secs(5), &env).unwrap();
        assert_eq!(repo.read_artifact(&r.stdout_path).unwrap().text.trim(), "seen");
    }

    #[test]
    fn timeout_kills_the_process_tree() {
        let dir = tempfile::tempdir().unwrap();
        let repo = coded_repo(dir.path());
        let start = Instant::now();
        let r = repo.execute("sleep 10 & sleep 10", Duration::from_secs(1), &[]).unwrap();
        assert!(r.timed_out);
        assert_eq!(r.exit_code, KILLED_EXIT_CODE);
        assert!((start.elapsed().as_secs_f64() - 1.0).abs() < 0.5);
    }

    #[test]
    fn best_metric_respects_direction() {
        let dir = tempfile::tempdir().unwrap();
        let repo = coded_repo(dir.path());
        assert!(repo.best_metric().is_none());
        let emit = |name: &str, v: f64, hib: bool| {
            format!(
                r#"printf '{{"metric_name":"{name}","value":{v},"higher_is_better":{hib},"split":"validation"}}' > metrics.json"#
            )
        };
        repo.execute(&emit("rmse", 2.0, false), Duration::from_secs(5), &[]).unwrap();
        repo.execute(&emit("rmse", 1.5, false), Duration::from_secs(5), &[]).unwrap();
        assert_eq!(repo.best_metric().unwrap().value, 1.5);

        let other = SolutionRepository::create(dir.path(), 2).unwrap();
        other.write_artifact("plan.md", "p").unwrap();
        other.write_artifact("code/a", "a").unwrap();
        other.execute(&emit("auc", 0.8, true), Duration::from_secs(5), &[]).unwrap();
        other.execute(&emit("auc", 0.9, true), Duration::from_secs(5), &[]).unwrap();
        assert_eq!(other.best_metric().unwrap().value, 0.9);
    }

    #[test]
    fn halt_kills_running_command_and_blocks_writes() {
        let dir = tempfile::tempdir().unwrap();
        let repo = Arc::new(coded_repo(dir.path()));
        let runner = {
            let repo = repo.clone();
            std::thread::spawn(move || repo.execute("sleep 30", Duration::from_secs(60), &[]))
        };
        let deadline = Instant::now() + Duration::from_secs(5);
        while repo.running.lock().unwrap().is_none() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(10));
        }
        let start = Instant::now();
        repo.halt("underperforming").unwrap();
        let r = runner.join().unwrap().unwrap();
        assert!(start.elapsed() < Duration::from_secs(2));
        assert!(r.killed);
        assert_eq!(repo.status(), RepoStatus::Halted);
        assert!(matches!(repo.write_artifact("plan.md", "x"), Err(WorkspaceError::State { .. })));
        assert!(matches!(repo.halt("again"), Err(WorkspaceError::State { .. })));
        assert_eq!(repo.halt_reason().as_deref(), Some("underperforming"));
        assert!(repo.summary(3).contains("halted: underperforming"));
    }

    #[test]
    fn recorded_transitions_are_all_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let repo = coded_repo(dir.path());
        repo.execute("true", Duration::from_secs(5), &[]).unwrap();
        repo.halt("done").unwrap();
        let transitions = repo.transitions();
        assert!(transitions.iter().all(|t| t.from.may_become(t.to)));
        assert_eq!(transitions.last().unwrap().to, RepoStatus::Halted);
    }
}
