//! A manager that never stops on its own, run under a five second budget.
//! The search phase is cut at its deadline and the aggregator still ships
//! the verified candidate.

use std::sync::Arc;
use std::time::{Duration, Instant};

use kbforge::agents::MaxSteps;
use kbforge::demo;
use kbforge::llm::{LlmClient, ScriptedBackend};
use kbforge::orchestrator::{run_task, RunBudget, RunRequest, SystemClock};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let (task, kb, _) = demo::write_golden_fixture(tmp.path())?;
    let data = std::fs::canonicalize(&task.data_dir)?;
    let backend = Arc::new(ScriptedBackend::new(demo::endless_script(&data)));
    let budget = RunBudget::new(Duration::from_secs(5), None, Duration::from_secs(1))?;
    println!("search deadline {:?}, aggregator reserve {:?}", budget.wall_clock - budget.aggregator_reserve, budget.aggregator_reserve);
    let mut req = RunRequest::new(task, kb, tmp.path().join("run"), budget);
    req.n_repos = 1;
    req.agents.max_steps = MaxSteps {
        manager: 10_000,
        tuner: 10_000,
        ..MaxSteps::default()
    };
    let started = Instant::now();
    let out = run_task(&req, LlmClient::new(backend), Arc::new(SystemClock::new()))?;
    println!("status {} after {:.2?}", out.status, started.elapsed());
    for p in &out.ledger.phases {
        println!("  {}: {:.2}s {}", p.phase, p.seconds, p.outcome);
    }
    Ok(())
}
