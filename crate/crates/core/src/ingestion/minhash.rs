//! Word shingling, MinHash signatures and greedy near-duplicate clustering.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{IngestionError, SourceDocument};

pub const DEFAULT_SHINGLE_SIZE: usize = 5;
pub const DEFAULT_NUM_HASHES: usize = 128;
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.85;

const EMPTY_SENTINEL: u64 = u64::MAX;

/// Lowercased whitespace tokens with punctuation-only tokens removed.
pub fn normalized_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .map(str::to_lowercase)
        .collect()
}

/// All contiguous `k`-token windows, each joined by single spaces.
pub fn shingle(text: &str, k: usize) -> BTreeSet<String> {
    assert!(k >= 1, "shingle size must be at least 1");
    let tokens = normalized_tokens(text);
    if tokens.len() < k {
        return BTreeSet::new();
    }
    tokens.windows(k).map(|w| w.join(" ")).collect()
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub values: Vec<u64>,
    pub num_hashes: usize,
    pub seed: u64,
    /// Set when the signature was computed over an empty shingle set.
    pub empty: bool,
}

/// Member `i` of the seeded family is `x -> mix(base(x) ^ salt_i)` where
/// `mix` is the splitmix64 finalizer and `salt_i` is derived from
/// `(seed, i)`.
pub fn minhash_signature(shingles: &BTreeSet<String>, num_hashes: usize, seed: u64) -> MinHashSignature {
    assert!(num_hashes >= 1, "num_hashes must be at least 1");
    if shingles.is_empty() {
        return MinHashSignature {
            values: vec![EMPTY_SENTINEL; num_hashes],
            num_hashes,
            seed,
            empty: true,
        };
    }
    let salts: Vec<u64> = (0..num_hashes as u64)
        .map(|i| splitmix64(seed ^ splitmix64(i.wrapping_add(0x5eed))))
        .collect();
    let mut values = vec![u64::MAX; num_hashes];
    for s in shingles {
        let base = fnv1a(s.as_bytes());
        for (slot, salt) in values.iter_mut().zip(&salts) {
            let h = splitmix64(base ^ salt);
            if h < *slot {
                *slot = h;
            }
        }
    }
    MinHashSignature {
        values,
        num_hashes,
        seed,
        empty: false,
    }
}

/// Fraction of signature positions that agree.
pub fn estimate_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64, IngestionError> {
    if a.num_hashes != b.num_hashes || a.seed != b.seed || a.values.len() != b.values.len() {
        return Err(IngestionError::IncomparableSignatures {
            left: (a.num_hashes, a.seed),
            right: (b.num_hashes, b.seed),
        });
    }
    match (a.empty, b.empty) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let agree = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.num_hashes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub shingle_size: usize,
    pub num_hashes: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            shingle_size: DEFAULT_SHINGLE_SIZE,
            num_hashes: DEFAULT_NUM_HASHES,
            seed: 0,
            threshold: DEFAULT_DEDUP_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateCluster {
    pub representative: String,
    /// Every member, representative included, in input order.
    pub members: Vec<String>,
}

impl DuplicateCluster {
    pub fn dropped(&self) -> impl Iterator<Item = &str> {
        self.members
            .iter()
            .map(String::as_str)
            .filter(move |m| *m != self.representative)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    pub kept: Vec<SourceDocument>,
    pub clusters: Vec<DuplicateCluster>,
}

impl DedupOutcome {
    pub fn dropped_count(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len() - 1).sum()
    }
}

/// Greedy all-pairs clustering: each unassigned document seeds a cluster
/// that absorbs every later unassigned document whose estimated Jaccard with
/// the seed reaches `threshold`. The longest text represents the cluster
/// (ties go to the lowest source id); kept documents stay in input order.
pub fn dedup_corpus(docs: &[SourceDocument], config: &DedupConfig) -> Result<DedupOutcome, IngestionError> {
    if !(config.threshold > 0.0 && config.threshold <= 1.0) {
        return Err(IngestionError::Config(format!(
            "dedup threshold must be in (0, 1], got {}",
            config.threshold
        )));
    }
    let signatures: Vec<MinHashSignature> = docs
        .iter()
        .map(|d| minhash_signature(&shingle(&d.text, config.shingle_size), config.num_hashes, config.seed))
        .collect();

    let mut assigned = vec![false; docs.len()];
    let mut representatives = Vec::new();
    let mut clusters = Vec::new();
    for i in 0..docs.len() {
        if assigned[i] {
            continue;
        }
        assigned[i] = true;
        let mut members = vec![i];
        for j in i + 1..docs.len() {
            if !assigned[j] && estimate_jaccard(&signatures[i], &signatures[j])? >= config.threshold {
                assigned[j] = true;
                members.push(j);
            }
        }
        let rep = *members
            .iter()
            .max_by(|&&a, &&b| {
                docs[a]
                    .text
                    .len()
                    .cmp(&docs[b].text.len())
                    .then_with(|| docs[b].source_id.cmp(&docs[a].source_id))
            })
            .expect("cluster has a seed");
        representatives.push(rep);
        if members.len() > 1 {
            clusters.push(DuplicateCluster {
                representative: docs[rep].source_id.clone(),
                members: members.iter().map(|&m| docs[m].source_id.clone()).collect(),
            });
        }
    }
    representatives.sort_unstable();
    Ok(DedupOutcome {
        kept: representatives.into_iter().map(|i| docs[i].clone()).collect(),
        clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::test_docs::doc;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn shingle_examples() {
        assert_eq!(shingle("a b c d", 2), set(&["a b", "b c", "c d"]));
        assert!(shingle("a b", 3).is_empty());
        assert_eq!(shingle("The  CAT, sat -- here", 2), set(&["the cat,", "cat, sat", "sat here"]));
    }

    proptest::proptest! {
        #[test]
        fn shingle_ignores_trailing_whitespace(s in "[a-z ,.!-]{0,80}", k in 1usize..5) {
            proptest::prop_assert_eq!(shingle(&s, k), shingle(&format!("{s} "), k));
        }
    }

    #[test]
    fn identical_sets_identical_signatures() {
        let s = shingle("one two three four five six seven", 3);
        assert_eq!(minhash_signature(&s, 64, 9), minhash_signature(&s, 64, 9));
        let sig = minhash_signature(&s, 64, 9);
        assert_eq!(estimate_jaccard(&sig, &sig).unwrap(), 1.0);
    }

    #[test]
    fn empty_set_is_flagged() {
        let sig = minhash_signature(&BTreeSet::new(), 8, 1);
        assert!(sig.empty);
        assert!(sig.values.iter().all(|v| *v == u64::MAX));
    }

    #[test]
    fn mismatched_parameters_are_incomparable() {
        let s = set(&["a"]);
        let a = minhash_signature(&s, 16, 1);
        let b = minhash_signature(&s, 16, 2);
        let c = minhash_signature(&s, 32, 1);
        assert!(estimate_jaccard(&a, &b).is_err());
        assert!(estimate_jaccard(&a, &c).is_err());
    }

    #[test]
    fn byte_identical_docs_collapse() {
        let text = "gradient boosted trees need careful learning rate schedules and early stopping";
        let docs = vec![doc("b", text), doc("a", text)];
        let out = dedup_corpus(&docs, &DedupConfig::default()).unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.clusters.len(), 1);
        assert_eq!(out.clusters[0].members.len(), 2);
        // equal lengths: lowest source id represents
        assert_eq!(out.kept[0].source_id, "a");
    }

    #[test]
    fn longest_text_represents_cluster() {
        let base = "w1 w2 w3 w4 w5 w6 w7 w8 w9 w10 w11 w12 w13 w14 w15 w16 w17 w18 w19 w20";
        let docs = vec![doc("s1", base), doc("s2", &format!("{base}!!"))];
        let out = dedup_corpus(&docs, &DedupConfig::default()).unwrap();
        assert_eq!(out.kept[0].source_id, "s2");
    }

    #[test]
    fn threshold_is_validated() {
        let cfg = DedupConfig {
            threshold: 0.0,
            ..Default::default()
        };
        assert!(dedup_corpus(&[], &cfg).is_err());
    }
}
