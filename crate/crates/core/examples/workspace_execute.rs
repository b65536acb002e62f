//! One solution repository: write files, run commands with a timeout, read
//! the parsed metrics, and pick the best successful run.

use std::time::Duration;

use kbforge::workspace::SolutionRepository;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let repo = SolutionRepository::create(tmp.path(), 1)?;
    repo.write_artifact("plan.md", "# Plan\nEcho a score.\n")?;
    repo.write_artifact("config.yaml", "score: 0.81\n")?;
    repo.write_artifact("code/train.sh", "echo training\n")?;
    let write_metric = |v: &str| {
        format!("printf '{{\"metric_name\":\"auc\",\"value\":{v},\"higher_is_better\":true,\"split\":\"validation\"}}' > metrics.json")
    };
    for command in [write_metric("0.81"), write_metric("0.86"), "sleep 5".to_string(), "exit 3".to_string()] {
        let r = repo.execute(&command, Duration::from_secs(1), &[])?;
        println!(
            "{} exit={} timed_out={} metric={:?}",
            r.run_id,
            r.exit_code,
            r.timed_out,
            r.parsed_metrics.as_ref().map(|m| m.value)
        );
    }
    println!("best: {:?}", repo.best_metric().map(|m| m.value));
    println!("{}", repo.summary(4));
    Ok(())
}
