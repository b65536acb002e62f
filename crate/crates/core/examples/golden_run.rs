//! Full scripted run on the toy table: setup, two designers, two coders,
//! aggregator. Pass a folder to keep the outputs; a temp folder is used
//! otherwise.

use std::sync::Arc;
use std::time::Duration;

use kbforge::demo;
use kbforge::llm::{LlmClient, ScriptedBackend};
use kbforge::orchestrator::{run_task, RunBudget, RunRequest, SystemClock};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let root = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| tmp.path().to_path_buf());
    let (task, kb, script) = demo::write_golden_fixture(&root)?;
    let backend = Arc::new(ScriptedBackend::load(&script)?);
    let budget = RunBudget::new(Duration::from_secs(600), None, Duration::from_secs(60))?;
    let mut req = RunRequest::new(task, kb, root.join("run"), budget);
    req.n_repos = 2;
    let out = run_task(&req, LlmClient::new(backend), Arc::new(SystemClock::new()))?;
    println!("{}", std::fs::read_to_string(out.final_dir.join("report.md"))?);
    println!("first predictions:");
    for line in std::fs::read_to_string(out.final_dir.join("check.csv"))?.lines().take(4) {
        println!("  {line}");
    }
    Ok(())
}
