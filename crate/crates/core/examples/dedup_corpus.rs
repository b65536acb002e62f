//! MinHash estimates against exact Jaccard, then near-duplicate removal on
//! a ten-source corpus that holds three copies of one page.

use kbforge::demo;
use kbforge::ingestion::{dedup_corpus, estimate_jaccard, load_corpus, minhash_signature, shingle, DedupConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = "hill climbing over out of fold predictions with replacement picks the best model each round";
    let b = "hill climbing over out of fold predictions without replacement picks the best model each round";
    let (sa, sb) = (shingle(a, 3), shingle(b, 3));
    let exact = sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64;
    let est = estimate_jaccard(&minhash_signature(&sa, 128, 7), &minhash_signature(&sb, 128, 7))?;
    println!("exact jaccard {exact:.3}, minhash estimate {est:.3}");

    let tmp = tempfile::tempdir()?;
    let (corpus, _) = demo::write_bootstrap_fixture(tmp.path())?;
    let docs = load_corpus(&corpus)?;
    let outcome = dedup_corpus(&docs, &DedupConfig::default())?;
    println!("{} sources, {} kept, {} dropped", docs.len(), outcome.kept.len(), outcome.dropped_count());
    for c in &outcome.clusters {
        println!("  cluster {:?}", c.members);
    }
    Ok(())
}
