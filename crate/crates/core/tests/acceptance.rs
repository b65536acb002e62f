//! Acceptance suite: one PASS/FAIL line per criterion, each with its pinned
//! tolerance and runtime limit. Everything runs on the scripted backend and
//! the built-in hashed embedder; expected values come from the oracles
//! below, not from the library under test.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::TimeZone;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use kbforge::agents::{read_transcript, AgentOutcome, AgentTranscript, MaxSteps, RoleName, TRANSCRIPTS_DIR};
use kbforge::builders::{bootstrap_knowledge_base, Builder, PipelineConfig};
use kbforge::demo;
use kbforge::ensemble::{hill_climb_blend, Metric, PredictionMatrix};
use kbforge::ingestion::{
    cluster_sources, dedup_corpus, embed, estimate_jaccard, minhash_signature, DedupConfig, HashedBagOfWords, Origin,
    OriginKind, SourceDocument,
};
use kbforge::knowledge::{
    load_knowledge_base, save_knowledge_base, CategoryKey, DocumentDraft, IntegrityMode, KnowledgeBase, KnowledgeError,
    Provenance, ProvenanceKind, Rule,
};
use kbforge::llm::{ChatMessage, LlmClient, RetryPolicy, Role, ScriptEntry, ScriptedBackend};
use kbforge::orchestrator::{
    post_run_evolve, run_task, OrchestratorError, RunBudget, RunOutput, RunRequest, RunStatus, SystemClock,
};
use kbforge::workspace::SolutionRepository;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn e2s(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- helpers

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn key(k: &str) -> CategoryKey {
    CategoryKey::new(k).unwrap()
}

fn scripted_builder(entries: Vec<ScriptEntry>, fixed_time: bool) -> Builder {
    let client = LlmClient::new(Arc::new(ScriptedBackend::new(entries))).with_retry(RetryPolicy::immediate(1));
    let mut b = Builder::new(client);
    if fixed_time {
        b.config.fixed_timestamp = Some(chrono::Utc.with_ymd_and_hms(2026, 5, 1, 0, 0, 0).unwrap());
    }
    b
}

fn bootstrap_into(root: &Path, out: &str, fixed_time: bool) -> Result<KnowledgeBase, String> {
    let (corpus, index) = demo::write_bootstrap_fixture(root).map_err(e2s)?;
    let b = scripted_builder(demo::bootstrap_script(), fixed_time);
    let (kb, _) = bootstrap_knowledge_base(
        &corpus,
        &index,
        &root.join(out),
        &b,
        &HashedBagOfWords::default(),
        &PipelineConfig::default(),
    )
    .map_err(e2s)?;
    Ok(kb)
}

/// Scripted golden run (n=2) over `kb`, or the demo knowledge base.
fn golden_run(root: &Path, kb: Option<&KnowledgeBase>) -> Result<(RunOutput, PathBuf, Arc<ScriptedBackend>), String> {
    let (task, kb_dir, script) = demo::write_golden_fixture(root).map_err(e2s)?;
    if let Some(kb) = kb {
        save_knowledge_base(kb, &kb_dir).map_err(e2s)?;
    }
    let backend = Arc::new(ScriptedBackend::load(&script).map_err(e2s)?);
    let budget = RunBudget::new(Duration::from_secs(600), None, Duration::from_secs(60)).map_err(e2s)?;
    let mut req = RunRequest::new(task, kb_dir.clone(), root.join("run"), budget);
    req.n_repos = 2;
    let out = run_task(&req, LlmClient::new(backend.clone()), Arc::new(SystemClock::new())).map_err(e2s)?;
    Ok((out, kb_dir, backend))
}

fn transcripts(run_dir: &Path) -> Result<Vec<AgentTranscript>, String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(run_dir.join(TRANSCRIPTS_DIR)).map_err(e2s)?.flatten() {
        out.push(read_transcript(&e.path())?);
    }
    out.sort_by_key(|t| t.seq);
    Ok(out)
}

// ------------------------------------------------ 1. knowledge-store suite

fn mutations() -> Vec<(&'static str, Rule, Box<dyn Fn(&mut KnowledgeBase)>)> {
    let tab = key("tabular");
    let ens = key("ensembling");
    let (t1, t2) = (tab.clone(), tab.clone());
    let (t3, t4, t5, t6, t7, t8, t9) = (tab.clone(), tab.clone(), tab.clone(), tab.clone(), tab.clone(), tab.clone(), tab.clone());
    let e1 = ens.clone();
    vec![
        ("duplicate taxonomy entry", Rule::DuplicateCategory, Box::new(|kb: &mut KnowledgeBase| {
            let first = kb.l1_index[0].clone();
            kb.l1_index.push(first);
        })),
        ("empty category description", Rule::EmptyCategoryDescription, Box::new(|kb: &mut KnowledgeBase| kb.l1_index[3].description.clear())),
        ("category description too long", Rule::CategoryDescriptionTooLong, Box::new(|kb: &mut KnowledgeBase| {
            kb.l1_index[3].description = "line\n".repeat(40);
        })),
        ("value outside the taxonomy", Rule::UnknownCategory, Box::new(move |kb: &mut KnowledgeBase| {
            let mut v = kb.l1_values[&t1].clone();
            v.key = key("cooking");
            v.l2_index.clear();
            kb.l1_values.insert(key("cooking"), v);
        })),
        ("value stored under the wrong key", Rule::ValueKeyMismatch, Box::new(move |kb: &mut KnowledgeBase| {
            kb.l1_values.get_mut(&t2).unwrap().key = e1.clone();
        })),
        ("empty instruction", Rule::EmptyInstruction, Box::new(move |kb: &mut KnowledgeBase| {
            kb.l1_values.get_mut(&t3).unwrap().instruction = "  \n".into();
        })),
        ("duplicate index entry", Rule::DuplicateIndexEntry, Box::new(move |kb: &mut KnowledgeBase| {
            let v = kb.l1_values.get_mut(&t4).unwrap();
            let first = v.l2_index[0].clone();
            v.l2_index.push(first);
        })),
        ("index points at a missing document", Rule::DanglingPointer, Box::new(move |kb: &mut KnowledgeBase| {
            kb.l2.get_mut(&t5).unwrap().remove("tabular-0001");
        })),
        ("unindexed document", Rule::OrphanDocument, Box::new(move |kb: &mut KnowledgeBase| {
            kb.insert_document(&t6, demo_draft("Extra notes.")).unwrap();
        })),
        ("document under the wrong category", Rule::DocumentKeyMismatch, Box::new(move |kb: &mut KnowledgeBase| {
            kb.l2.get_mut(&t7).unwrap().get_mut("tabular-0002").unwrap().key = ens.clone();
        })),
        ("empty body", Rule::EmptyBody, Box::new(move |kb: &mut KnowledgeBase| {
            kb.l2.get_mut(&t8).unwrap().get_mut("tabular-0002").unwrap().body = "\n".into();
        })),
        ("empty document description", Rule::EmptyDescription, Box::new(move |kb: &mut KnowledgeBase| {
            kb.l2.get_mut(&t9).unwrap().get_mut("tabular-0002").unwrap().description.clear();
        })),
        ("document description too long", Rule::DescriptionTooLong, Box::new(|kb: &mut KnowledgeBase| {
            kb.l2.get_mut(&key("tabular")).unwrap().get_mut("tabular-0002").unwrap().description = "line\n".repeat(40);
        })),
        ("missing provenance", Rule::MissingProvenance, Box::new(|kb: &mut KnowledgeBase| {
            kb.l2.get_mut(&key("tabular")).unwrap().get_mut("tabular-0002").unwrap().provenance.sources.clear();
        })),
    ]
}

fn demo_draft(body: &str) -> DocumentDraft {
    DocumentDraft {
        body: body.into(),
        description: "Extra".into(),
        provenance: Provenance {
            kind: ProvenanceKind::WebSources,
            sources: vec!["https://example.org/extra".into()],
        },
        created_at: chrono::Utc.with_ymd_and_hms(2026, 4, 1, 0, 0, 0).unwrap(),
    }
}

fn knowledge_store_suite() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let fixtures = [("demo", demo::demo_kb()), ("bootstrapped", bootstrap_into(tmp.path(), "boot", true)?)];
    let mut checks = 0;

    // round trip identity, in memory and on disk
    for (name, kb) in &fixtures {
        for mode in [IntegrityMode::Strict, IntegrityMode::PendingEvolution] {
            let r = kb.validate_integrity(mode);
            ensure!(r.is_clean(), "{name} fixture has violations under {mode:?}: {:?}", r.violations);
        }
        let (a, b) = (tmp.path().join(format!("{name}-a")), tmp.path().join(format!("{name}-b")));
        save_knowledge_base(kb, &a).map_err(e2s)?;
        let loaded = load_knowledge_base(&a).map_err(e2s)?;
        ensure!(&loaded == kb, "{name}: load(save(kb)) != kb");
        save_knowledge_base(&loaded, &b).map_err(e2s)?;
        ensure!(tree_bytes(&a) == tree_bytes(&b), "{name}: re-saving changed bytes");
        checks += 3;
    }

    // strict/pending closure: an inserted document is pending until indexed
    let mut kb = demo::demo_kb();
    let tab = key("tabular");
    let id = kb.insert_document(&tab, demo_draft("Pending notes.")).map_err(e2s)?;
    let strict = kb.validate_integrity(IntegrityMode::Strict);
    ensure!(strict.count(Rule::OrphanDocument) == 1 && strict.violations.len() == 1, "strict after insert: {:?}", strict.violations);
    ensure!(kb.validate_integrity(IntegrityMode::PendingEvolution).is_clean(), "pending mode rejects a fresh insert");
    ensure!(save_knowledge_base(&kb, &tmp.path().join("pending")).is_err(), "a pending store was saved");
    let mut value = kb.l1_values[&tab].clone();
    value.l2_index.push(kbforge::knowledge::IndexEntry { doc_id: id.clone(), description: "Extra".into() });
    value.revision += 1;
    kb.replace_l1_value(&tab, value).map_err(e2s)?;
    ensure!(kb.validate_integrity(IntegrityMode::Strict).is_clean(), "indexing the pending doc did not close the store");
    checks += 4;

    // every mutation is detected by the rule it breaks
    let mut detected = 0;
    let all = mutations();
    for (name, rule, mutate) in &all {
        let mut kb = demo::demo_kb();
        mutate(&mut kb);
        let r = kb.validate_integrity(IntegrityMode::Strict);
        ensure!(r.count(*rule) >= 1, "mutation `{name}` not detected as {rule:?}: {:?}", r.violations);
        detected += 1;
    }
    // on-disk mutations: a deleted document and a foreign file
    let disk = tmp.path().join("disk");
    save_knowledge_base(&demo::demo_kb(), &disk).map_err(e2s)?;
    let docs = disk.join("categories/tabular/docs");
    std::fs::remove_file(docs.join("tabular-0001.md")).map_err(e2s)?;
    let caught = match load_knowledge_base(&disk) {
        Ok(kb) => kb.validate_integrity(IntegrityMode::Strict).count(Rule::DanglingPointer) == 1,
        Err(_) => true,
    };
    ensure!(caught, "a deleted document file went unnoticed");
    save_knowledge_base(&demo::demo_kb(), &disk).map_err(e2s)?;
    std::fs::copy(docs.join("tabular-0002.md"), docs.join("tabular-0009.md")).map_err(e2s)?;
    let caught = match load_knowledge_base(&disk) {
        Ok(kb) => !kb.validate_integrity(IntegrityMode::Strict).is_clean(),
        Err(_) => true,
    };
    ensure!(caught, "a foreign document file went unnoticed");
    detected += 2;

    // closed taxonomy
    let mut kb = demo::demo_kb();
    ensure!(matches!(kb.insert_document(&key("cooking"), demo_draft("x")), Err(KnowledgeError::Taxonomy(_))), "insert outside taxonomy accepted");
    let mut foreign = kb.l1_values[&tab].clone();
    foreign.key = key("cooking");
    ensure!(kb.replace_l1_value(&key("cooking"), foreign).is_err(), "value outside taxonomy accepted");
    ensure!(kb.resolve_key("cooking").is_err() && CategoryKey::new("Tabular Data").is_err(), "malformed or unknown key resolved");
    ensure!(kb.l1_index.len() == 30, "taxonomy size changed");
    checks += 3;

    // revision monotonicity under random proposals
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut last = kb.l1_values[&tab].revision;
    for _ in 0..200 {
        let mut v = kb.l1_values[&tab].clone();
        v.revision = rng.random_range(0..last + 3);
        let accepted = kb.replace_l1_value(&tab, v.clone()).is_ok();
        ensure!(accepted == (v.revision > last), "revision {} accepted={accepted} with current {last}", v.revision);
        let now = kb.l1_values[&tab].revision;
        ensure!(now >= last, "revision went backwards");
        last = now;
    }
    checks += 1;
    Ok(format!("{checks} property checks, 0 violations on fixtures, {detected}/{} mutations detected", all.len() + 2))
}

// ------------------------------------------------------- 2. MinHash oracle

const LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const UNION: usize = 40;

/// Two sets with exactly `j * UNION` shared of `UNION` distinct elements.
fn set_pair(rng: &mut ChaCha8Rng, j: f64) -> (BTreeSet<String>, BTreeSet<String>) {
    let shared = (j * UNION as f64).round() as usize;
    let mut pool = BTreeSet::new();
    while pool.len() < UNION {
        pool.insert(format!("w{:016x}", rng.random::<u64>()));
    }
    let pool: Vec<String> = pool.into_iter().collect();
    let (common, rest) = pool.split_at(shared);
    let half = rest.len() / 2;
    let a = common.iter().chain(&rest[..half]).cloned().collect();
    let b = common.iter().chain(&rest[half..]).cloned().collect();
    (a, b)
}

fn exact_jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    a.intersection(b).count() as f64 / a.union(b).count() as f64
}

fn minhash_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut within, mut trials, mut worst) = (0, 0, 0.0f64);
    for t in 0..200 {
        let j = LEVELS[t % LEVELS.len()];
        let (a, b) = set_pair(&mut rng, j);
        ensure!(exact_jaccard(&a, &b) == j, "construction gave {} for {j}", exact_jaccard(&a, &b));
        let seed = 1000 + t as u64;
        let est = estimate_jaccard(&minhash_signature(&a, 128, seed), &minhash_signature(&b, 128, seed)).map_err(e2s)?;
        let err = (est - j).abs();
        worst = worst.max(err);
        trials += 1;
        if err <= 0.12 {
            within += 1;
        }
    }
    let share = within as f64 / trials as f64;
    ensure!(share >= 0.95, "only {within}/{trials} estimates within 0.12");
    let mut worst_mean = 0.0f64;
    for j in LEVELS {
        let (a, b) = set_pair(&mut rng, j);
        let mut sum = 0.0;
        for seed in 0..50u64 {
            sum += estimate_jaccard(&minhash_signature(&a, 128, seed), &minhash_signature(&b, 128, seed)).map_err(e2s)?;
        }
        let dev = (sum / 50.0 - j).abs();
        worst_mean = worst_mean.max(dev);
        ensure!(dev <= 0.05, "mean over 50 seeds at J={j} is off by {dev:.4}");
    }
    Ok(format!(
        "{within}/{trials} within 0.12 (need 95%), worst {worst:.3}; 50-seed means within {worst_mean:.4} (need 0.05)"
    ))
}

// ------------------------------------------------ 3. dedup and clustering

fn source(id: &str, text: String) -> SourceDocument {
    SourceDocument {
        source_id: id.into(),
        text,
        origin: Origin {
            kind: OriginKind::Blog,
            location: format!("https://example.org/{id}"),
        },
        fetched_at: chrono::Utc.with_ymd_and_hms(2026, 3, 1, 0, 0, 0).unwrap(),
    }
}

fn random_text(rng: &mut ChaCha8Rng, words: usize) -> Vec<String> {
    (0..words).map(|_| format!("tok{}", rng.random_range(0..5000u32))).collect()
}

/// Word `k`-shingles, computed here rather than by the library.
fn word_shingles(text: &str, k: usize) -> BTreeSet<String> {
    let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    tokens.windows(k).map(|w| w.join(" ")).collect()
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn dedup_and_cluster() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut docs: Vec<SourceDocument> = (0..7).map(|i| source(&format!("d{i}"), random_text(&mut rng, 200).join(" "))).collect();
    let base = random_text(&mut rng, 200);
    let mut edited = base.clone();
    *edited.last_mut().unwrap() = "changed".into();
    docs.push(source("c1", base.join(" ")));
    docs.push(source("c2", edited.join(" ")));
    docs.push(source("c3", base.join(" ")));

    let config = DedupConfig {
        threshold: 0.85,
        ..DedupConfig::default()
    };
    let copies = ["c1", "c2", "c3"];
    let sh: BTreeMap<&str, BTreeSet<String>> =
        docs.iter().map(|d| (d.source_id.as_str(), word_shingles(&d.text, config.shingle_size))).collect();
    let mut min_copy = 1.0f64;
    for (i, a) in copies.iter().enumerate() {
        for b in &copies[i + 1..] {
            min_copy = min_copy.min(exact_jaccard(&sh[a], &sh[b]));
        }
    }
    ensure!(min_copy >= 0.95, "copies only reach exact Jaccard {min_copy:.3}");
    let mut max_other = 0.0f64;
    for a in &docs {
        for b in &docs {
            if a.source_id < b.source_id && !(copies.contains(&a.source_id.as_str()) && copies.contains(&b.source_id.as_str())) {
                max_other = max_other.max(exact_jaccard(&sh[a.source_id.as_str()], &sh[b.source_id.as_str()]));
            }
        }
    }

    let out = dedup_corpus(&docs, &config).map_err(e2s)?;
    let kept: BTreeSet<String> = out.kept.iter().map(|d| d.source_id.clone()).collect();
    let dropped: Vec<String> = out.clusters.iter().flat_map(|c| c.dropped().map(String::from)).collect();
    let dropped_set: BTreeSet<String> = dropped.iter().cloned().collect();
    let all: BTreeSet<String> = docs.iter().map(|d| d.source_id.clone()).collect();
    ensure!(dropped.len() == dropped_set.len(), "a source was dropped twice");
    ensure!(kept.is_disjoint(&dropped_set), "kept and dropped overlap");
    ensure!(kept.union(&dropped_set).cloned().collect::<BTreeSet<_>>() == all, "kept + dropped does not cover the corpus");
    ensure!(kept.len() == 8, "kept {} of 10", kept.len());
    ensure!(out.clusters.len() == 1 && out.clusters[0].members == copies, "clusters {:?}", out.clusters);

    // clustering: two topics of three sources each
    let topic = |rng: &mut ChaCha8Rng| random_text(rng, 60);
    let (ta, tb) = (topic(&mut rng), topic(&mut rng));
    let variant = |base: &[String], rng: &mut ChaCha8Rng, tag: &str| {
        let mut w = base.to_vec();
        for i in 0..6 {
            let at = rng.random_range(0..w.len());
            w[at] = format!("{tag}{i}");
        }
        w.join(" ")
    };
    let mut six = Vec::new();
    for i in 0..3 {
        six.push(source(&format!("a{i}"), variant(&ta, &mut rng, &format!("a{i}x"))));
        six.push(source(&format!("b{i}"), variant(&tb, &mut rng, &format!("b{i}x"))));
    }
    let provider = HashedBagOfWords::default();
    let threshold = PipelineConfig::default().cosine_threshold;
    let vecs: Vec<Vec<f64>> = six.iter().map(|d| embed(d, &provider).unwrap()).collect();
    let (mut min_in, mut max_cross) = (1.0f64, -1.0f64);
    for i in 0..six.len() {
        for j in i + 1..six.len() {
            let c = oracle_cosine(&vecs[i], &vecs[j]);
            let lib = kbforge::ingestion::cosine(&vecs[i], &vecs[j]);
            ensure!((c - lib).abs() <= 1e-9, "cosine mismatch {c} vs {lib}");
            if six[i].source_id[..1] == six[j].source_id[..1] {
                min_in = min_in.min(c);
            } else {
                max_cross = max_cross.max(c);
            }
        }
    }
    ensure!(min_in >= threshold && max_cross < threshold, "fixture not separable: within {min_in:.3}, across {max_cross:.3}");
    let groups = cluster_sources(&six, &provider, threshold, 3).map_err(e2s)?;
    let got: BTreeSet<BTreeSet<String>> = groups.iter().map(|g| g.members.iter().cloned().collect()).collect();
    let want: BTreeSet<BTreeSet<String>> = [["a0", "a1", "a2"], ["b0", "b1", "b2"]]
        .iter()
        .map(|g| g.iter().map(|s| s.to_string()).collect())
        .collect();
    ensure!(got == want, "groups {got:?}");
    Ok(format!(
        "partition holds; copies J>={min_copy:.3}, others J<={max_other:.3}; kept 8/10 at 0.85; 2 groups of 3 (cos within >= {min_in:.3}, across <= {max_cross:.3}, threshold {threshold})"
    ))
}

// ----------------------------------------------------- 4. hill-climb blend

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// 1-based average ranks.
fn avg_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (avg_ranks(a), avg_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn oracle_score(metric: Metric, p: &[f64], y: &[f64]) -> f64 {
    match metric {
        Metric::RankCorrelation => spearman(p, y),
        Metric::MeanAbsoluteError => mae(p, y),
    }
}

fn compositions(m: usize, t: usize) -> Vec<Vec<usize>> {
    if m == 1 {
        return vec![vec![t]];
    }
    let mut out = Vec::new();
    for first in 0..=t {
        for mut rest in compositions(m - 1, t - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Bag average of rank fractions in (0, 1].
fn bag(ranks: &[Vec<f64>], counts: &[usize]) -> Vec<f64> {
    let n = ranks[0].len();
    let t: usize = counts.iter().sum();
    (0..n)
        .map(|r| {
            // integer numerators keep tied blends exactly tied
            let num: u64 = counts.iter().zip(ranks).map(|(c, m)| *c as u64 * (2.0 * m[r]).round() as u64).sum();
            num as f64 / (2 * n * t) as f64
        })
        .collect()
}

fn hill_climb_oracle() -> Outcome {
    let rounds = 14;
    let comps = compositions(4, rounds);
    ensure!(comps.len() == 680, "{} count vectors", comps.len());
    let mut matched = 0;
    let mut ties = 0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = 300;
        let s1: Vec<f64> = (0..rows).map(|_| normal(&mut rng)).collect();
        let s2: Vec<f64> = (0..rows).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| 0.7 * a + 0.3 * b + 0.05 * normal(&mut rng)).collect();
        let s3: Vec<f64> = s1.iter().map(|a| a + 0.8 * normal(&mut rng)).collect();
        let s4: Vec<f64> = (0..rows).map(|_| normal(&mut rng)).collect();
        let values = vec![s1, s2, s3, s4];
        let ranks: Vec<Vec<f64>> = values.iter().map(|v| avg_ranks(v)).collect();
        let m = PredictionMatrix::new((1..=4).map(|i| format!("s{i}")).collect(), values, Some(y.clone())).map_err(e2s)?;
        let fit = hill_climb_blend(&m, Metric::RankCorrelation, rounds).map_err(e2s)?;
        let (mut best_c, mut best_s) = (Vec::new(), f64::NEG_INFINITY);
        for c in &comps {
            let s = spearman(&bag(&ranks, c), &y);
            if s > best_s + 1e-12 {
                best_s = s;
                best_c = c.clone();
            }
        }
        let greedy = spearman(&bag(&ranks, &fit.counts), &y);
        ensure!((greedy - fit.score).abs() <= 1e-9, "seed {seed}: reported score {} vs oracle {greedy}", fit.score);
        ensure!((fit.weights.sum() - 1.0).abs() <= 1e-9, "weights sum to {}", fit.weights.sum());
        for ((_, w), c) in fit.weights.weights.iter().zip(&fit.counts) {
            ensure!((w - *c as f64 / rounds as f64).abs() <= 1e-12, "weight {w} is not {c}/{rounds}");
        }
        if fit.counts == best_c {
            matched += 1;
        } else {
            ensure!((greedy - best_s).abs() <= 1e-9, "seed {seed}: greedy {:?}={greedy} vs brute {best_c:?}={best_s}", fit.counts);
            ties += 1;
        }
    }

    let mut regret_free = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let models = rng.random_range(2..6);
        let rows = rng.random_range(20..120);
        let y: Vec<f64> = (0..rows).map(|_| normal(&mut rng)).collect();
        let values: Vec<Vec<f64>> = (0..models)
            .map(|_| y.iter().map(|v| v * rng.random_range(0.0..1.0) + normal(&mut rng)).collect())
            .collect();
        let ranks: Vec<Vec<f64>> = values.iter().map(|v| avg_ranks(v)).collect();
        let m = PredictionMatrix::new((0..models).map(|i| format!("m{i}")).collect(), values, Some(y.clone())).map_err(e2s)?;
        for metric in [Metric::RankCorrelation, Metric::MeanAbsoluteError] {
            let fit = hill_climb_blend(&m, metric, rounds).map_err(e2s)?;
            let blend = oracle_score(metric, &bag(&ranks, &fit.counts), &y);
            let singles = ranks.iter().map(|r| oracle_score(metric, &bag(&[r.clone()], &[1]), &y));
            let best = match metric {
                Metric::RankCorrelation => singles.fold(f64::NEG_INFINITY, f64::max),
                Metric::MeanAbsoluteError => singles.fold(f64::INFINITY, f64::min),
            };
            let regret = match metric {
                Metric::RankCorrelation => best - blend,
                Metric::MeanAbsoluteError => blend - best,
            };
            ensure!(regret <= 1e-9, "seed {seed} {metric:?}: blend {blend} worse than best single {best}");
            ensure!((fit.weights.sum() - 1.0).abs() <= 1e-9, "weights sum to {}", fit.weights.sum());
            ensure!(fit.counts.iter().sum::<usize>() == rounds, "counts {:?}", fit.counts);
        }
        regret_free += 1;
    }
    Ok(format!(
        "5 synthetic cases vs 680 bags: {matched} exact, {ties} metric ties (tol 1e-9); no regret on {regret_free}/100 instances x 2 metrics; weight sums within 1e-9"
    ))
}

// -------------------------------------------- 5. dynamic context loading

fn sentinel_l1(k: &str) -> String {
    format!("SENTINEL-L1-{k}")
}

fn sentinel_l2(doc: &str) -> String {
    format!("SENTINEL-L2-{doc}")
}

fn sentinel_kb() -> KnowledgeBase {
    let mut kb = demo::demo_kb();
    for (k, v) in kb.l1_values.iter_mut() {
        v.instruction.push_str(&format!("Marker {}.\n", sentinel_l1(k.as_str())));
    }
    for docs in kb.l2.values_mut() {
        for (id, d) in docs.iter_mut() {
            d.body.push_str(&format!("\nMarker {}.\n", sentinel_l2(id)));
        }
    }
    kb
}

#[derive(Default)]
struct Loaded {
    cats: BTreeSet<String>,
    docs: BTreeSet<String>,
}

impl Loaded {
    fn absorb(&mut self, args: &serde_json::Value) {
        let k = args.get("key").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        match args.get("doc_id").and_then(|v| v.as_str()) {
            Some(d) => {
                self.docs.insert(d.to_string());
            }
            None => {
                self.cats.insert(k);
            }
        }
    }

    /// Sentinels in `text` that no earlier query explains.
    fn unexplained(&self, text: &str, all: &[(String, String, bool)]) -> Vec<String> {
        all.iter()
            .filter(|(s, target, is_doc)| {
                text.contains(s.as_str()) && !if *is_doc { self.docs.contains(target) } else { self.cats.contains(target) }
            })
            .map(|(s, _, _)| s.clone())
            .collect()
    }
}

fn context_loading() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let kb = sentinel_kb();
    let mut all: Vec<(String, String, bool)> = Vec::new();
    for k in kb.l1_values.keys() {
        all.push((sentinel_l1(k.as_str()), k.to_string(), false));
    }
    for docs in kb.l2.values() {
        for id in docs.keys() {
            all.push((sentinel_l2(id), id.clone(), true));
        }
    }
    let (out, _, backend) = golden_run(tmp.path(), Some(&kb))?;
    ensure!(out.status == RunStatus::Success, "run status {:?}", out.status);

    // transcripts on disk
    let ts = transcripts(&out.run_dir)?;
    let mut seen = BTreeSet::new();
    let mut rejected = 0;
    for t in &ts {
        let mut loaded = Loaded::default();
        for m in &t.initial_context {
            let bad = loaded.unexplained(&m.content, &all);
            ensure!(bad.is_empty(), "{} initial context carries {bad:?}", t.file_name());
        }
        for step in &t.steps {
            for x in &step.tools {
                if x.name == "query" && !x.is_error {
                    loaded.absorb(&x.args);
                }
                if x.name == "query" && x.is_error && x.args.get("doc_id").is_some() && x.result.contains("load the category first") {
                    rejected += 1;
                    ensure!(all.iter().all(|(s, _, _)| !x.result.contains(s.as_str())), "a rejected query leaked content");
                }
                let bad = loaded.unexplained(&x.result, &all);
                ensure!(bad.is_empty(), "{} step {} tool {} shows {bad:?} before its query", t.file_name(), step.index, x.name);
                for (s, _, _) in &all {
                    if x.result.contains(s.as_str()) {
                        seen.insert(s.clone());
                    }
                }
            }
        }
    }

    // the exact contexts the backend received
    let requests = backend.requests();
    for (n, r) in requests.iter().enumerate() {
        let mut loaded = Loaded::default();
        let mut calls: BTreeMap<String, serde_json::Value> = BTreeMap::new();
        for m in &r.messages {
            let m: &ChatMessage = m;
            for c in &m.tool_calls {
                if c.name == "query" {
                    calls.insert(c.id.clone(), c.args.clone());
                }
            }
            if m.role == Role::ToolResult {
                if let Some(args) = m.tool_call_id.as_ref().and_then(|id| calls.get(id)) {
                    if !m.content.starts_with("error") {
                        loaded.absorb(args);
                    }
                }
            }
            let bad = loaded.unexplained(&m.content, &all);
            ensure!(bad.is_empty(), "request {n} ({:?} message) carries {bad:?} without a matching query", m.role);
        }
    }
    ensure!(rejected >= 1, "no document-before-category call was rejected");
    ensure!(seen.len() >= 3, "only {} sentinels ever loaded; the scan proves nothing", seen.len());
    Ok(format!(
        "{} transcripts and {} backend contexts scanned, {}/{} sentinels loaded only after their query, {rejected} document-first call rejected",
        ts.len(),
        requests.len(),
        seen.len(),
        all.len()
    ))
}

// ----------------------------------------------- 6. agent-loop contracts

fn contract_script() -> Vec<ScriptEntry> {
    let mut s = vec![
        ScriptEntry::text("Shared environment folder", "Nothing to install."),
        ScriptEntry::tools(
            "Repositories overview",
            vec![
                ("invoke_designer_1", json!({"instructions": "first"})),
                ("invoke_designer_1", json!({"instructions": "conflicting second"})),
                ("invoke_designer_2", json!({"instructions": "explore"})),
            ],
        ),
        ScriptEntry::tools(
            "Repository 1 | designer",
            vec![
                ("write_2", json!({"path": "plan.md", "content": "not mine"})),
                ("hill_climb_blend", json!({})),
                ("invoke_coder_1", json!({})),
            ],
        ),
        ScriptEntry::tools(
            "not available to the designer role",
            vec![("write_1", json!({"path": "plan.md", "content": "# Plan\nLinear score.\n"}))],
        ),
        ScriptEntry::text("repo-1: wrote plan.md", "Plan written."),
        ScriptEntry::tools("Repository 2 | designer", vec![("query", json!({"key": "ensembling"}))]),
    ];
    for _ in 0..20 {
        s.push(ScriptEntry::tools("Blend models only through", vec![("query", json!({"key": "ensembling"}))]));
    }
    s.push(ScriptEntry::tools("designer:", vec![("invoke_designer_1", json!({"instructions": "review"}))]));
    s.push(ScriptEntry::text("Repository 1 | designer", "The plan stands."));
    s.push(ScriptEntry::text("designer:", "Done for now."));
    s
}

fn agent_contracts() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let (task, kb, _) = demo::write_golden_fixture(tmp.path()).map_err(e2s)?;
    let backend = Arc::new(ScriptedBackend::new(contract_script()));
    let budget = RunBudget::new(Duration::from_secs(120), None, Duration::from_secs(10)).map_err(e2s)?;
    let mut req = RunRequest::new(task, kb, tmp.path().join("run"), budget);
    req.n_repos = 2;
    let designer_cap = 4;
    req.agents.max_steps = MaxSteps {
        designer: designer_cap,
        ..MaxSteps::default()
    };
    let out = run_task(&req, LlmClient::new(backend.clone()), Arc::new(SystemClock::new())).map_err(e2s)?;
    ensure!(out.failed_phase.is_none(), "phase crashed: {:?}", out.failed_phase);
    let ts = transcripts(&out.run_dir)?;

    // forbidden tools are error results and the loop carries on
    let d1: Vec<&AgentTranscript> = ts.iter().filter(|t| t.role == RoleName::Designer && t.repo_id == Some(1)).collect();
    ensure!(d1.len() == 2, "{} designer-1 transcripts", d1.len());
    let first = &d1[0].steps[0];
    let forbidden: Vec<&str> = first.tools.iter().filter(|x| x.is_error && x.result.contains("not available")).map(|x| x.name.as_str()).collect();
    ensure!(forbidden.len() == 3, "forbidden results {forbidden:?}");
    ensure!(d1[0].outcome == AgentOutcome::Completed && d1[0].steps.len() == 3, "designer 1 ended {:?} after {} steps", d1[0].outcome, d1[0].steps.len());
    ensure!(!out.run_dir.join("repos/repo-2/plan.md").exists() || std::fs::read_to_string(out.run_dir.join("repos/repo-2/plan.md")).map_err(e2s)? != "not mine", "a forbidden write landed");

    // max_steps
    let d2 = ts.iter().find(|t| t.role == RoleName::Designer && t.repo_id == Some(2)).ok_or("no designer-2 transcript")?;
    ensure!(d2.outcome == AgentOutcome::StepLimit && d2.steps.len() == designer_cap, "designer 2: {:?} after {} steps", d2.outcome, d2.steps.len());
    for t in &ts {
        let cap = req.agents.max_steps.for_role(t.role);
        ensure!(t.steps.len() <= cap, "{} ran {} steps over cap {cap}", t.file_name(), t.steps.len());
    }

    // lease exclusivity from step intervals
    let manager = ts.iter().find(|t| t.role == RoleName::Manager).ok_or("no manager transcript")?;
    let batch = &manager.steps[0].tools;
    let invokes: Vec<_> = batch.iter().filter(|x| x.name == "invoke_designer_1").collect();
    let busy: Vec<_> = invokes.iter().filter(|x| x.is_error && x.result.contains("busy")).collect();
    let held: Vec<_> = invokes.iter().filter(|x| !x.is_error).collect();
    ensure!(busy.len() == 1 && held.len() == 1, "conflicting invocations: {} busy, {} held", busy.len(), held.len());
    ensure!(
        held[0].started_ms <= busy[0].started_ms && busy[0].ended_ms <= held[0].ended_ms,
        "the refused call did not happen while the lease was held"
    );
    let mut per_repo: BTreeMap<usize, Vec<(i64, i64)>> = BTreeMap::new();
    for t in ts.iter().filter(|t| t.role.is_worker()) {
        let span = (
            t.steps.first().map_or(t.started_ms, |s| s.started_ms).min(t.started_ms),
            t.steps.last().map_or(t.ended_ms, |s| s.ended_ms).max(t.ended_ms),
        );
        per_repo.entry(t.repo_id.unwrap_or(0)).or_default().push(span);
    }
    let mut pairs = 0;
    for (repo, spans) in &mut per_repo {
        spans.sort();
        for w in spans.windows(2) {
            ensure!(w[0].1 <= w[1].0, "repo-{repo} has overlapping sub-agents {:?} and {:?}", w[0], w[1]);
            pairs += 1;
        }
    }
    Ok(format!(
        "3 forbidden calls became errors and the designer finished; step cap {designer_cap} held; 1 conflicting invocation refused inside the holder's interval; {pairs} sequential same-repo pair(s) disjoint"
    ))
}

// ------------------------------------------------- 7. golden end-to-end

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = std::fs::read_to_string(path).map_err(e2s)?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

/// The toy model recomputed: weights on rows [0, 160), validation AUC on
/// the rest, and the predictions file for the test rows.
fn toy_oracle(data: &Path, features: &[usize]) -> Result<(f64, String), String> {
    let train = csv_rows(&data.join("train/train.csv"))?;
    let (fit, valid) = train.split_at(demo::FIT_ROWS);
    let x = |r: &Vec<String>, c: usize| r[c].parse::<f64>().unwrap();
    let weights: Vec<f64> = features
        .iter()
        .map(|&c| {
            let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
            for r in fit {
                if r[3] == "1" {
                    s1 += x(r, c);
                    n1 += 1.0;
                } else {
                    s0 += x(r, c);
                    n0 += 1.0;
                }
            }
            s1 / n1 - s0 / n0
        })
        .collect();
    let score = |r: &Vec<String>| {
        let mut s = 0.0;
        for (w, &c) in weights.iter().zip(features) {
            s += w * x(r, c);
        }
        s
    };
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for r in valid {
        if r[3] == "1" {
            pos.push(score(r));
        } else {
            neg.push(score(r));
        }
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    let auc = wins / (pos.len() * neg.len()) as f64;
    let mut preds = String::from("id,score\n");
    for r in csv_rows(&data.join("test/test.csv"))? {
        preds.push_str(&format!("{},{:.6}\n", r[0], score(&r)));
    }
    Ok((auc, preds))
}

fn golden_end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let (out, _, backend) = golden_run(tmp.path(), None)?;
    ensure!(out.status == RunStatus::Success, "status {:?}", out.status);
    ensure!(backend.remaining() == 0, "{} script entries unused", backend.remaining());
    let data = std::fs::canonicalize(tmp.path().join("data")).map_err(e2s)?;
    let (auc1, preds1) = toy_oracle(&data, &[1, 2])?;
    let (auc2, _) = toy_oracle(&data, &[1])?;

    // metrics.json parsing and best_metric direction
    let m = out.manifest.as_ref().ok_or("no manifest")?;
    let value = |r: usize| m.candidates.iter().find(|c| c.repo == r).map(|c| c.value);
    ensure!(value(1) == Some(auc1) && value(2) == Some(auc2), "candidates {:?} vs oracle {auc1} / {auc2}", m.candidates);
    ensure!(auc1 > auc2 && m.repos == vec![1], "chose {:?} with oracle AUCs {auc1} / {auc2}", m.repos);
    let probe = SolutionRepository::create(&tmp.path().join("probe"), 1).map_err(e2s)?;
    probe.write_artifact("plan.md", "# Plan\n").map_err(e2s)?;
    probe.write_artifact("code/x.sh", "true\n").map_err(e2s)?;
    for v in ["0.40", "0.25", "0.31"] {
        let cmd = format!("printf '{{\"metric_name\":\"mae\",\"value\":{v},\"higher_is_better\":false,\"split\":\"validation\"}}' > metrics.json");
        probe.execute(&cmd, Duration::from_secs(10), &[]).map_err(e2s)?;
    }
    probe.execute("exit 1", Duration::from_secs(10), &[]).map_err(e2s)?;
    let best = probe.best_metric().ok_or("no best metric")?;
    ensure!(best.value == 0.25, "lower-is-better best was {}", best.value);

    // final/inference against the test data, byte for byte
    let shipped = tmp.path().join("shipped.csv");
    let status = std::process::Command::new(out.final_dir.join("inference"))
        .arg(data.join("test"))
        .arg(&shipped)
        .current_dir("/")
        .status()
        .map_err(e2s)?;
    ensure!(status.success(), "final/inference exited {status}");
    let got = std::fs::read_to_string(&shipped).map_err(e2s)?;
    ensure!(got == preds1, "predictions differ from the oracle");
    let report = std::fs::read_to_string(out.final_dir.join("report.md")).map_err(e2s)?;
    ensure!(report.contains("Status: success") && report.contains("Source repositories: repo-1\n"), "report does not name repo-1");
    Ok(format!(
        "success; {} predictions byte-identical; validation AUC {auc1:.6} vs {auc2:.6} matches oracle exactly; lower-is-better best 0.25",
        got.lines().count() - 1
    ))
}

// ------------------------------------------------- 8. budget enforcement

fn budget_enforcement() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let (task, kb, _) = demo::write_golden_fixture(tmp.path()).map_err(e2s)?;
    let data = std::fs::canonicalize(&task.data_dir).map_err(e2s)?;
    let backend = Arc::new(ScriptedBackend::new(demo::endless_script(&data)));
    let wall = Duration::from_secs(5);
    let exec = Duration::from_secs(1);
    let budget = RunBudget::new(wall, None, exec).map_err(e2s)?;
    let mut req = RunRequest::new(task, kb, tmp.path().join("run"), budget);
    req.n_repos = 1;
    req.agents.max_steps = MaxSteps {
        manager: 100_000,
        tuner: 100_000,
        ..MaxSteps::default()
    };
    let started = Instant::now();
    let out = run_task(&req, LlmClient::new(backend), Arc::new(SystemClock::new())).map_err(e2s)?;
    let took = started.elapsed();
    let phase = |n: &str| out.ledger.phases.iter().find(|p| p.phase == n).cloned().ok_or(format!("no {n} phase"));
    let (setup, manager, aggregator) = (phase("setup")?, phase("manager")?, phase("aggregator")?);
    ensure!(manager.outcome == "budget_exhausted", "manager ended {}", manager.outcome);
    let manager_end = setup.seconds + manager.seconds;
    let limit = (wall + exec).as_secs_f64();
    ensure!(manager_end <= limit, "manager stopped at {manager_end:.2}s, limit {limit}s");
    ensure!(aggregator.outcome != "skipped", "aggregator did not run");
    let code = out.status.exit_code();
    ensure!(code == 0 || code == 2, "exit status {code}");
    ensure!(took <= wall + exec, "run took {took:?}");
    Ok(format!(
        "manager stopped at {manager_end:.2}s (search deadline {:.2}s, limit {limit}s); aggregator {}; exit {code}; total {:.2}s",
        (budget.wall_clock - budget.aggregator_reserve).as_secs_f64(),
        aggregator.outcome,
        took.as_secs_f64()
    ))
}

// ----------------------------------------------------- 9. evolution loop

fn revisions(kb: &KnowledgeBase) -> BTreeMap<String, u64> {
    kb.l1_values.iter().map(|(k, v)| (k.to_string(), v.revision)).collect()
}

fn evolution_loop() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let (out, kb_dir, _) = golden_run(tmp.path(), None)?;
    let before = load_knowledge_base(&kb_dir).map_err(e2s)?;
    let spare = tmp.path().join("kb-spare");
    save_knowledge_base(&before, &spare).map_err(e2s)?;

    let builder = scripted_builder(demo::evolve_run_script(&out.run_id), false);
    let report = post_run_evolve(&out.run_dir, &kb_dir, &builder).map_err(e2s)?;
    let after = load_knowledge_base(&kb_dir).map_err(e2s)?;
    ensure!(after.document_count() == before.document_count() + 1, "docs {} -> {}", before.document_count(), after.document_count());
    let (rb, ra) = (revisions(&before), revisions(&after));
    let changed: Vec<_> = ra.iter().filter(|(k, v)| rb.get(*k) != Some(v)).collect();
    ensure!(changed.len() == 1, "revisions changed: {changed:?}");
    let (k, v) = changed[0];
    ensure!(rb.get(k).map(|b| b + 1) == Some(*v), "{k}: {:?} -> {v}", rb.get(k));
    ensure!(after.validate_integrity(IntegrityMode::Strict).is_clean(), "not strict-valid after evolution");
    ensure!(report.entries.len() == 1, "report lists {} entries", report.entries.len());

    let snapshot = tree_bytes(&kb_dir);
    let again = post_run_evolve(&out.run_dir, &kb_dir, &scripted_builder(demo::evolve_run_script(&out.run_id), false));
    ensure!(matches!(again, Err(OrchestratorError::AlreadyEvolved(_))), "second evolution was not refused");
    ensure!(tree_bytes(&kb_dir) == snapshot, "refused evolution changed the store");

    // scripted builder failures, at each builder, leave the bytes alone
    let spare_bytes = tree_bytes(&spare);
    let good_l2 = demo::evolve_run_script(&out.run_id).remove(0);
    let failures: [(&str, Vec<ScriptEntry>); 2] = [
        (
            "document builder",
            vec![ScriptEntry::text("# Run digest", "no envelope"), ScriptEntry::text("", "still no envelope")],
        ),
        (
            "instruction builder",
            vec![good_l2, ScriptEntry::text("New document to fold in", "no fenced block"), ScriptEntry::text("", "again nothing")],
        ),
    ];
    for (stage, script) in failures {
        let r = post_run_evolve(&out.run_dir, &spare, &scripted_builder(script, false));
        ensure!(r.is_err(), "{stage} failure was reported as success");
        ensure!(tree_bytes(&spare) == spare_bytes, "{stage} failure changed the store bytes");
    }
    Ok(format!(
        "+1 document ({} -> {}), {k} revision {} -> {v}, strict-valid, second call refused, 2 scripted failures left bytes identical",
        before.document_count(),
        after.document_count(),
        rb[k]
    ))
}

// ------------------------------------------------ 10. pipeline determinism

/// Blanks every `created_at` value so wall-clock stamps compare equal.
fn normalize_timestamps(tree: BTreeMap<String, Vec<u8>>) -> BTreeMap<String, Vec<u8>> {
    tree.into_iter()
        .map(|(path, bytes)| {
            let text = String::from_utf8_lossy(&bytes).into_owned();
            let mut out = String::new();
            let mut rest = text.as_str();
            while let Some(at) = rest.find("\"created_at\"") {
                let (head, tail) = rest.split_at(at);
                out.push_str(head);
                let end = tail.find(',').or_else(|| tail.find('\n')).unwrap_or(tail.len());
                out.push_str("\"created_at\": <normalized>");
                rest = &tail[end..];
            }
            out.push_str(rest);
            (path, out.into_bytes())
        })
        .collect()
}

fn pipeline_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ka = bootstrap_into(&a, "kb", true)?;
    let kb_b = bootstrap_into(&b, "kb", true)?;
    ensure!(ka == kb_b, "in-memory results differ");
    ensure!(tree_bytes(&a.join("kb")) == tree_bytes(&b.join("kb")), "knowledge bases differ byte-wise");
    ensure!(tree_bytes(&a.join("kb.pipeline")) == tree_bytes(&b.join("kb.pipeline")), "pipeline artifacts differ");
    let files = tree_bytes(&a.join("kb")).len();

    // wall-clock stamps: identical once timestamps are normalized
    let (c, d) = (tmp.path().join("c"), tmp.path().join("d"));
    bootstrap_into(&c, "kb", false)?;
    std::thread::sleep(Duration::from_millis(1100));
    bootstrap_into(&d, "kb", false)?;
    let (tc, td) = (tree_bytes(&c.join("kb")), tree_bytes(&d.join("kb")));
    ensure!(normalize_timestamps(tc) == normalize_timestamps(td), "knowledge bases differ beyond timestamps");
    Ok(format!("{files} files byte-identical with a fixed stamp; identical after timestamp normalization with wall-clock stamps; {} docs", ka.document_count()))
}

// ------------------------------------------------------------------ runner

fn main() {
    let criteria: [(u32, &str, u64, fn() -> Outcome); 10] = [
        (1, "knowledge-store suite", 5, knowledge_store_suite),
        (2, "MinHash oracle equivalence", 10, minhash_oracle),
        (3, "dedup/cluster partition properties", 5, dedup_and_cluster),
        (4, "hill-climb blend oracle", 30, hill_climb_oracle),
        (5, "dynamic context loading", 10, context_loading),
        (6, "agent-loop contracts", 10, agent_contracts),
        (7, "golden end-to-end run", 60, golden_end_to_end),
        (8, "budget enforcement", 15, budget_enforcement),
        (9, "evolution loop", 10, evolution_loop),
        (10, "pipeline determinism", 15, pipeline_determinism),
    ];
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (n, name, limit, check) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        let result = match result {
            Ok(detail) if secs >= limit as f64 => Err(format!("{detail}; but took {secs:.2}s")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.2}s < {limit}s]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {reason} [{secs:.2}s, limit {limit}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
