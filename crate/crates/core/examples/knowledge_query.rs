//! Dynamic context loading over the demo knowledge base: the taxonomy is
//! always visible, a category query loads its instruction and index, and a
//! document query only works once its category is loaded.

use kbforge::agents::{query_tool, LoadedKnowledge};
use kbforge::demo;
use kbforge::knowledge::IntegrityMode;
use serde_json::json;

fn main() {
    let kb = demo::demo_kb();
    println!("{} categories, {} built", kb.l1_index.len(), kb.l1_values.len());
    println!("strict violations: {}", kb.validate_integrity(IntegrityMode::Strict).violations.len());

    let mut loaded = LoadedKnowledge::default();
    for args in [
        json!({"key": "tabular", "doc_id": "tabular-0001"}),
        json!({"key": "tabular"}),
        json!({"key": "tabular", "doc_id": "tabular-0001"}),
        json!({"key": "audio"}),
        json!({"key": "cooking"}),
    ] {
        let reply = query_tool(&kb, &mut loaded, &args);
        let first = reply.content.lines().next().unwrap_or_default();
        println!("{args} -> {first}");
    }
    println!("loaded categories: {:?}", loaded.categories);
}
