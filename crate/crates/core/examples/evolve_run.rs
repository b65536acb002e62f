//! Runs the golden scenario, then distils it into the knowledge base. The
//! second attempt is refused because the run id is already recorded.

use std::sync::Arc;
use std::time::Duration;

use kbforge::builders::Builder;
use kbforge::demo;
use kbforge::knowledge::load_knowledge_base;
use kbforge::llm::{LlmClient, RetryPolicy, ScriptedBackend};
use kbforge::orchestrator::{post_run_evolve, run_task, RunBudget, RunRequest, SystemClock};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let (task, kb, script) = demo::write_golden_fixture(tmp.path())?;
    let budget = RunBudget::new(Duration::from_secs(600), None, Duration::from_secs(60))?;
    let mut req = RunRequest::new(task, kb.clone(), tmp.path().join("run"), budget);
    req.n_repos = 2;
    let backend = Arc::new(ScriptedBackend::load(&script)?);
    let out = run_task(&req, LlmClient::new(backend), Arc::new(SystemClock::new()))?;
    println!("run {} finished: {}", out.run_id, out.status);

    let client = LlmClient::new(Arc::new(ScriptedBackend::new(demo::evolve_run_script(&out.run_id))))
        .with_retry(RetryPolicy::immediate(1));
    let builder = Builder::new(client);
    let report = post_run_evolve(&out.run_dir, &kb, &builder)?;
    for e in &report.entries {
        println!("{} -> {} ({}), revision {:?} -> {}", e.item, e.doc_id, e.category, e.revision_before, e.revision_after);
    }
    println!("documents: {} -> {}", report.docs_before, report.docs_after);
    match post_run_evolve(&out.run_dir, &kb, &builder) {
        Ok(_) => println!("unexpected second evolution"),
        Err(e) => println!("second attempt: {e}"),
    }
    let doc = load_knowledge_base(&kb)?;
    let tabular = doc.resolve_key("tabular")?;
    println!("{}", doc.query_document(&tabular, "tabular-0003")?.body.trim());
    Ok(())
}
