//! Deterministic, size-capped digest of a finished run directory.

use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use crate::workspace::{SolutionRepository, PLAN_FILE};

pub const RUN_FILE: &str = "run.json";
pub const FINAL_REPORT: &str = "final/report.md";
pub const DEFAULT_DIGEST_CAP: usize = 32_000;
pub const FAILED_LOG_TAIL_LINES: usize = 50;

const PLAN_CAP: usize = 4_000;
const TAIL_WINDOW_BYTES: u64 = 256 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct RunDigest {
    pub run_id: String,
    pub text: String,
}

/// Last `n` lines of a file, reading at most the final 256 KiB.
pub fn tail_lines(path: &Path, n: usize) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let len = file.metadata()?.len();
    let start = len.saturating_sub(TAIL_WINDOW_BYTES);
    file.seek(SeekFrom::Start(start))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let text = String::from_utf8_lossy(&bytes);
    let lines: Vec<&str> = text.lines().collect();
    Ok(lines[lines.len().saturating_sub(n)..].join("\n"))
}

/// Cuts to at most `cap` characters, marker included.
pub fn cap_chars(text: &str, cap: usize) -> String {
    let total = text.chars().count();
    if total <= cap {
        return text.to_string();
    }
    let marker = format!("\n[... digest cut, {total} characters total ...]\n");
    let keep = cap.saturating_sub(marker.chars().count());
    let mut out: String = text.chars().take(keep).collect();
    out.push_str(&marker);
    out.chars().take(cap).collect()
}

fn repo_ids(run_dir: &Path) -> Vec<usize> {
    let mut ids: Vec<usize> = std::fs::read_dir(run_dir)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("repo-")?.parse().ok())
        .collect();
    ids.sort_unstable();
    ids
}

/// Errors are precondition messages.
pub fn build_run_digest(run_dir: &Path, cap: usize) -> Result<RunDigest, String> {
    let report = run_dir.join(FINAL_REPORT);
    if !report.is_file() {
        return Err(format!("{} has no {FINAL_REPORT}; the run is not complete", run_dir.display()));
    }
    let run_file: PathBuf = run_dir.join(RUN_FILE);
    let run: serde_json::Value = std::fs::read_to_string(&run_file)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .ok_or_else(|| format!("{} is missing or unreadable", run_file.display()))?;
    let run_id = run["run_id"]
        .as_str()
        .filter(|s| !s.is_empty())
        .ok_or("run.json has no run_id")?
        .to_string();
    let task = &run["task"];

    let mut text = format!("# Run digest {run_id}\n\n## Task\n");
    text.push_str(&format!(
        "id: {}\nmetric: {} ({})\n\n{}\n",
        task["task_id"].as_str().unwrap_or("?"),
        task["metric_name"].as_str().unwrap_or("?"),
        if task["higher_is_better"].as_bool().unwrap_or(true) {
            "higher is better"
        } else {
            "lower is better"
        },
        task["description"].as_str().unwrap_or("").trim()
    ));

    let repos: Vec<SolutionRepository> = repo_ids(run_dir)
        .into_iter()
        .filter_map(|id| SolutionRepository::open(run_dir, id).ok())
        .collect();

    text.push_str("\n## Plans\n");
    for repo in &repos {
        let plan = std::fs::read_to_string(repo.root().join(PLAN_FILE)).unwrap_or_default();
        text.push_str(&format!("\n### repo-{} [{}]\n", repo.id(), repo.status()));
        if let Some(reason) = repo.halt_reason() {
            text.push_str(&format!("halted: {reason}\n"));
        }
        text.push_str(&cap_chars(plan.trim(), PLAN_CAP));
        text.push('\n');
    }

    text.push_str("\n## Best metrics\n");
    for repo in &repos {
        match repo.best_metric() {
            Some(m) => text.push_str(&format!("- repo-{}: {} = {}\n", repo.id(), m.metric_name, m.value)),
            None => text.push_str(&format!("- repo-{}: none\n", repo.id())),
        }
    }

    text.push_str("\n## Failed executions\n");
    for repo in &repos {
        for result in repo.results().iter().filter(|r| !r.succeeded()) {
            let err_log = repo.root().join(&result.stderr_path);
            let mut tail = tail_lines(&err_log, FAILED_LOG_TAIL_LINES).unwrap_or_default();
            if tail.trim().is_empty() {
                tail = tail_lines(&repo.root().join(&result.stdout_path), FAILED_LOG_TAIL_LINES).unwrap_or_default();
            }
            text.push_str(&format!(
                "\n### repo-{} {} (exit {}{})\n$ {}\n{}\n",
                repo.id(),
                result.run_id,
                result.exit_code,
                if result.timed_out { ", timed out" } else { "" },
                result.command,
                tail
            ));
        }
    }

    Ok(RunDigest {
        run_id,
        text: cap_chars(&text, cap),
    })
}
