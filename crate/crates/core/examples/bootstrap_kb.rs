//! Builds a knowledge base from a small corpus with scripted builder
//! replies: dedup, relevance, clustering, documents, then instructions.

use std::sync::Arc;

use chrono::TimeZone;
use kbforge::builders::{bootstrap_knowledge_base, Builder, PipelineConfig};
use kbforge::demo;
use kbforge::ingestion::HashedBagOfWords;
use kbforge::llm::{LlmClient, RetryPolicy, ScriptedBackend};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let (corpus, index) = demo::write_bootstrap_fixture(tmp.path())?;
    let client = LlmClient::new(Arc::new(ScriptedBackend::new(demo::bootstrap_script()))).with_retry(RetryPolicy::immediate(1));
    let mut builder = Builder::new(client);
    builder.config.fixed_timestamp = Some(chrono::Utc.with_ymd_and_hms(2026, 5, 1, 0, 0, 0).unwrap());
    let out = tmp.path().join("kb");
    let (kb, report) =
        bootstrap_knowledge_base(&corpus, &index, &out, &builder, &HashedBagOfWords::default(), &PipelineConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    for (key, value) in &kb.l1_values {
        println!("{key} rev {}: {}", value.revision, value.instruction.trim());
    }
    Ok(())
}
