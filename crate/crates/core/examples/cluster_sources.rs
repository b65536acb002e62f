//! Groups sources by embedding cosine with the built-in hashed
//! bag-of-words provider.

use kbforge::demo;
use kbforge::ingestion::{cluster_sources, dedup_corpus, load_corpus, DedupConfig, HashedBagOfWords};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let (corpus, _) = demo::write_bootstrap_fixture(tmp.path())?;
    let kept = dedup_corpus(&load_corpus(&corpus)?, &DedupConfig::default())?.kept;
    let groups = cluster_sources(&kept, &HashedBagOfWords::default(), 0.7, 4)?;
    for g in groups {
        println!("{}: {:?}", g.group_id, g.members);
    }
    Ok(())
}
