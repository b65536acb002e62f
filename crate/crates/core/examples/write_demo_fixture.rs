//! Writes the toy task, demo knowledge base, and golden script into a
//! folder so the `kbforge` binary can replay the run:
//!
//!     cargo run --example write_demo_fixture -- /tmp/demo
//!     kbforge run --task-file /tmp/demo/task.toml --kb /tmp/demo/kb \
//!         --repos 2 --scripted /tmp/demo/golden.jsonl --run-dir /tmp/demo/run

use std::path::PathBuf;

use kbforge::demo;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| "demo".into());
    let (task, kb, script) = demo::write_golden_fixture(&root)?;
    println!("task   {}", root.join("task.toml").display());
    println!("data   {}", task.data_dir.display());
    println!("kb     {}", kb.display());
    println!("script {}", script.display());
    Ok(())
}
