//! A small, fully scripted scenario: a toy tabular task, a seeded knowledge
//! base over the shipped taxonomy, and the backend script of a two-repository
//! run that trains, scores, and ships a pure-Python solution.

use std::path::{Path, PathBuf};

use chrono::{TimeZone, Utc};
use serde_json::json;

use crate::knowledge::{
    DocumentDraft, IndexEntry, KnowledgeBase, L1IndexEntry, L1Value, Provenance, ProvenanceKind,
};
use crate::llm::ScriptEntry;
use crate::orchestrator::TaskSpec;

pub const TRAIN_ROWS: usize = 200;
pub const TEST_ROWS: usize = 50;
/// Rows after this index form the validation split of the toy solution.
pub const FIT_ROWS: usize = 160;

pub const TAXONOMY_JSON: &str = include_str!("../assets/l1_index.json");

/// The shipped 30-category taxonomy.
pub fn taxonomy() -> Vec<L1IndexEntry> {
    serde_json::from_str(TAXONOMY_JSON).expect("bundled taxonomy parses")
}

/// Feature values of toy row `i`, already rounded to what the CSV holds.
pub fn toy_features(i: usize) -> (f64, f64) {
    let x1 = ((i * 37 + 11) % 101) as f64 / 100.0;
    let x2 = ((i * 53 + 7) % 97) as f64 / 96.0;
    let round = |v: f64| format!("{v:.4}").parse::<f64>().expect("formatted float parses");
    (round(x1), round(x2))
}

/// Label of toy row `i`: a linear rule with every seventh label flipped.
pub fn toy_label(i: usize) -> u8 {
    let (x1, x2) = toy_features(i);
    let y = u8::from(x1 + 0.5 * x2 > 0.75);
    if i % 7 == 3 {
        1 - y
    } else {
        y
    }
}

/// Writes `data/train/train.csv`, `data/test/test.csv`, and `task.toml`
/// under `root` and returns the loaded task.
pub fn write_toy_task(root: &Path) -> std::io::Result<TaskSpec> {
    let data = root.join("data");
    std::fs::create_dir_all(data.join("train"))?;
    std::fs::create_dir_all(data.join("test"))?;
    let mut train = String::from("id,x1,x2,y\n");
    for i in 0..TRAIN_ROWS {
        let (x1, x2) = toy_features(i);
        train.push_str(&format!("{i},{x1:.4},{x2:.4},{}\n", toy_label(i)));
    }
    std::fs::write(data.join("train/train.csv"), train)?;
    let mut test = String::from("id,x1,x2\n");
    for i in TRAIN_ROWS..TRAIN_ROWS + TEST_ROWS {
        let (x1, x2) = toy_features(i);
        test.push_str(&format!("{i},{x1:.4},{x2:.4}\n"));
    }
    std::fs::write(data.join("test/test.csv"), test)?;
    let task = "task_id = \"toy-tabular\"\n\
        metric_name = \"auc\"\n\
        higher_is_better = true\n\
        data_dir = \"data\"\n\
        description = \"\"\"\n\
        Binary classification on a small table. train/train.csv has columns id, x1, x2 and the label y;\n\
        test/test.csv has id, x1, x2. Predict a score per test row; higher means y=1 is more likely.\n\
        Evaluation: ROC AUC. The entry point is called as `inference <test_dir> <output_file>` and must\n\
        write a CSV with header id,score.\n\
        \"\"\"\n";
    let path = root.join("task.toml");
    std::fs::write(&path, task)?;
    TaskSpec::load(&path).map_err(|e| std::io::Error::other(e.to_string()))
}

fn draft(body: &str, description: &str, source: &str) -> DocumentDraft {
    DocumentDraft {
        body: body.to_string(),
        description: description.to_string(),
        provenance: Provenance {
            kind: ProvenanceKind::WebSources,
            sources: vec![source.to_string()],
        },
        created_at: Utc.with_ymd_and_hms(2026, 3, 1, 0, 0, 0).unwrap(),
    }
}

pub const TABULAR_INSTRUCTION: &str = "Start from a linear baseline on standardized columns, then move to \
gradient boosted trees once the pipeline is verified. Hold out a validation split before any fitting and \
report the task metric on it.\n";
pub const ENSEMBLING_INSTRUCTION: &str = "Blend models only through their out-of-fold predictions. Rank-average \
before weighting when metrics are rank based, and keep a blend only if it beats the best single model.\n";

/// The taxonomy with `tabular` and `ensembling` built (two documents and
/// one); every other category is left unbuilt.
pub fn demo_kb() -> KnowledgeBase {
    let mut kb = KnowledgeBase::with_index(taxonomy()).expect("bundled taxonomy is valid");
    let mut build = |key: &str, instruction: &str, docs: &[(&str, &str)]| {
        let key = crate::knowledge::CategoryKey::new(key).expect("demo key");
        let mut index = Vec::new();
        for (i, (body, description)) in docs.iter().enumerate() {
            let id = kb
                .insert_document(&key, draft(body, description, &format!("https://example.org/{key}/{i}")))
                .expect("demo document inserts");
            index.push(IndexEntry {
                doc_id: id,
                description: description.to_string(),
            });
        }
        kb.replace_l1_value(
            &key,
            L1Value {
                key: key.clone(),
                instruction: instruction.to_string(),
                l2_index: index,
                revision: 1,
            },
        )
        .expect("demo value is consistent");
    };
    build(
        "tabular",
        TABULAR_INSTRUCTION,
        &[
            (
                "Difference-of-means linear score: for each feature take the mean among positives minus the mean \
                 among negatives and score rows by the weighted sum. It needs no dependencies and ranks well when \
                 classes shift linearly.\n",
                "Dependency-free linear scoring baseline",
            ),
            (
                "Target encoding for high-cardinality categoricals: compute encodings out of fold and add noise.\n",
                "Out-of-fold target encoding",
            ),
        ],
    );
    build(
        "ensembling",
        ENSEMBLING_INSTRUCTION,
        &[(
            "Hill climbing with replacement over out-of-fold predictions: start from the best single model, add \
             the model that most improves the blend, stop after a fixed number of rounds.\n",
            "Greedy blend weight search",
        )],
    );
    kb
}

pub const TRAIN_PY: &str = r#"import csv
import json
import os
import sys

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def features():
    feats = ["x1", "x2"]
    with open(os.path.join(ROOT, "config.yaml")) as f:
        for line in f:
            if line.startswith("features:"):
                feats = [s.strip() for s in line.split(":", 1)[1].split(",") if s.strip()]
    return feats


def auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def main():
    data = sys.argv[1]
    feats = features()
    with open(os.path.join(data, "train", "train.csv")) as f:
        rows = list(csv.DictReader(f))
    fit, valid = rows[:160], rows[160:]
    weights = {}
    for name in feats:
        s1 = n1 = s0 = n0 = 0.0
        for r in fit:
            if r["y"] == "1":
                s1 += float(r[name])
                n1 += 1
            else:
                s0 += float(r[name])
                n0 += 1
        weights[name] = s1 / n1 - s0 / n0

    def score(r):
        s = 0.0
        for name in feats:
            s += weights[name] * float(r[name])
        return s

    scores = [score(r) for r in valid]
    labels = [int(r["y"]) for r in valid]
    with open(os.path.join(ROOT, "model.json"), "w") as f:
        json.dump({"features": feats, "weights": weights}, f)
    with open(os.path.join(ROOT, "oof.csv"), "w") as f:
        f.write("row_id,prediction\n")
        for r, s in zip(valid, scores):
            f.write("%s,%.6f\n" % (r["id"], s))
    with open(os.path.join(ROOT, "oof_labels.csv"), "w") as f:
        f.write("row_id,label\n")
        for r in valid:
            f.write("%s,%s\n" % (r["id"], r["y"]))
    value = auc(scores, labels)
    with open(os.path.join(ROOT, "metrics.json"), "w") as f:
        json.dump({"metric_name": "auc", "value": value, "higher_is_better": True, "split": "validation"}, f)
    print("validation auc %.6f" % value)


main()
"#;

pub const PREDICT_PY: &str = r#"import csv
import json
import os
import sys

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

with open(os.path.join(ROOT, "model.json")) as f:
    model = json.load(f)
test_dir, out = sys.argv[1], sys.argv[2]
with open(os.path.join(test_dir, "test.csv")) as f:
    rows = list(csv.DictReader(f))
with open(out, "w") as f:
    f.write("id,score\n")
    for r in rows:
        s = 0.0
        for name in model["features"]:
            s += model["weights"][name] * float(r[name])
        f.write("%s,%.6f\n" % (r["id"], s))
"#;

pub const REPO_INFERENCE: &str = "#!/bin/sh\nexec python3 \"$(dirname \"$0\")/code/predict.py\" \"$@\"\n";

/// Final entry script that defers to one repository's copy.
pub fn final_inference(repo: usize) -> String {
    format!("#!/bin/sh\nexec sh \"$(dirname \"$0\")/artifacts/repo-{repo}/inference\" \"$@\"\n")
}

fn coder_entries(repo: usize, features: &str, data_dir: &Path) -> Vec<ScriptEntry> {
    let write = format!("write_{repo}");
    vec![
        ScriptEntry::tools(
            &format!("Repository {repo} | coder"),
            vec![
                (write.as_str(), json!({"path": "code/train.py", "content": TRAIN_PY})),
                (write.as_str(), json!({"path": "code/predict.py", "content": PREDICT_PY})),
                (write.as_str(), json!({"path": "inference", "content": REPO_INFERENCE})),
                (write.as_str(), json!({"path": "config.yaml", "content": format!("features: {features}\n")})),
            ],
        ),
        ScriptEntry::tools(
            &format!("repo-{repo}: wrote config.yaml"),
            vec![(
                &format!("execute_{repo}"),
                json!({"command": format!("python3 code/train.py {}", data_dir.display())}),
            )],
        ),
        ScriptEntry::text(&format!("repo-{repo} run-0001 exit=0"), "Verified: training runs end to end and writes metrics.json."),
    ]
}

/// The golden run: setup, two designers, two coders, and an aggregator that
/// ships repository 1. `data_dir` must be the absolute task data folder.
pub fn golden_script(data_dir: &Path) -> Vec<ScriptEntry> {
    let mut s = vec![
        ScriptEntry::tools("Shared environment folder", vec![("execute_env", json!({"command": "python3 --version"}))]),
        ScriptEntry::text("env exit=0", "python3 is available; no packages needed.\nEXPORT PYTHONDONTWRITEBYTECODE=1\n"),
        ScriptEntry::tools(
            "Repositories overview",
            vec![
                ("query", json!({"key": "tabular"})),
                ("invoke_designer_1", json!({"instructions": "use both features"})),
                ("invoke_designer_2", json!({"instructions": "try x1 alone"})),
            ],
        ),
        // repository 1 reads its category first, then one document
        ScriptEntry::tools("Repository 1 | designer", vec![("query", json!({"key": "tabular"}))]),
        ScriptEntry::tools("Start from a linear baseline", vec![("query", json!({"key": "tabular", "doc_id": "tabular-0001"}))]),
        ScriptEntry::tools(
            "Difference-of-means linear score",
            vec![("write_1", json!({"path": "plan.md", "content": "# Plan\nDifference-of-means linear score on x1 and x2.\nValidate on rows 160-199 with AUC.\n"}))],
        ),
        ScriptEntry::text("repo-1: wrote plan.md", "Plan written: linear score on x1 and x2."),
        // repository 2 asks for a document before its category and is told to load the category
        ScriptEntry::tools("Repository 2 | designer", vec![("query", json!({"key": "ensembling", "doc_id": "ensembling-0001"}))]),
        ScriptEntry::tools("load the category first", vec![("query", json!({"key": "ensembling"}))]),
        ScriptEntry::tools(
            "Blend models only through their out-of-fold",
            vec![("write_2", json!({"path": "plan.md", "content": "# Plan\nDifference-of-means score on x1 only; keep out-of-fold predictions for blending.\n"}))],
        ),
        ScriptEntry::text("repo-2: wrote plan.md", "Plan written: x1-only variant."),
        ScriptEntry::tools("designer: completed", vec![("invoke_coder_1", json!({})), ("invoke_coder_2", json!({}))]),
    ];
    s.extend(coder_entries(1, "x1,x2", data_dir));
    s.extend(coder_entries(2, "x1", data_dir));
    s.push(ScriptEntry::text("coder: completed", "Both repositories are verified; repo-1 leads on validation AUC."));
    s.push(ScriptEntry::tools(
        "Candidates for the final output",
        vec![
            ("write_final", json!({"path": "inference", "content": final_inference(1)})),
            (
                "execute_final",
                json!({"command": format!("./inference {} check.csv", data_dir.join("test").display())}),
            ),
        ],
    ));
    s.push(ScriptEntry::text("final exit=0", "repo-1 has the higher validation AUC.\nSTRATEGY: single\nREPOS: 1\n"));
    s
}

/// A run that never ends on its own: once repository 1 holds a verified
/// candidate, the manager keeps handing it to a tuner whose every command
/// outlives the execute timeout. Only the budget can stop it.
pub fn endless_script(data_dir: &Path) -> Vec<ScriptEntry> {
    let mut s = vec![
        ScriptEntry::text("Shared environment folder", "Nothing to install."),
        ScriptEntry::tools("Repositories overview", vec![("invoke_designer_1", json!({"instructions": "linear baseline"}))]),
        ScriptEntry::tools(
            "Repository 1 | designer",
            vec![("write_1", json!({"path": "plan.md", "content": "# Plan\nDifference-of-means linear score.\n"}))],
        ),
        ScriptEntry::text("repo-1: wrote plan.md", "Plan written."),
        ScriptEntry::tools("designer: completed", vec![("invoke_coder_1", json!({}))]),
    ];
    s.extend(coder_entries(1, "x1,x2", data_dir));
    for _ in 0..200 {
        s.push(ScriptEntry::tools("completed after", vec![("invoke_tuner_1", json!({"instructions": "search further"}))]));
    }
    for _ in 0..200 {
        s.push(ScriptEntry::tools("Repository 1 | tuner", vec![("execute_1", json!({"command": "sleep 30"}))]));
        s.push(ScriptEntry::tools("repo-1 run-", vec![("execute_1", json!({"command": "sleep 30"}))]));
    }
    s.push(ScriptEntry::text("Candidates for the final output", "STRATEGY: single\nREPOS: 1\n"));
    s
}

/// Writes the toy task, the demo knowledge base, and the golden script
/// under `root`. Returns `(task, kb_dir, script_file)`.
pub fn write_golden_fixture(root: &Path) -> std::io::Result<(TaskSpec, PathBuf, PathBuf)> {
    let task = write_toy_task(root)?;
    let kb_dir = root.join("kb");
    crate::knowledge::save_knowledge_base(&demo_kb(), &kb_dir).map_err(|e| std::io::Error::other(e.to_string()))?;
    let data = std::fs::canonicalize(&task.data_dir)?;
    let script = root.join("golden.jsonl");
    std::fs::write(&script, crate::llm::ScriptedBackend::to_jsonl(&golden_script(&data)))?;
    Ok((task, kb_dir, script))
}

/// A document-builder reply in the fenced envelope the builders parse.
pub fn l2_envelope(category: &str, description: &str, body: &str) -> String {
    format!("```\nCATEGORY: {category}\nDESCRIPTION: {description}\n\n{body}\n```")
}

/// An instruction-builder reply: the full pointer index, then the instruction.
pub fn l1_envelope(index: &[(&str, &str)], instruction: &str) -> String {
    let mut out = String::from("```\n");
    for (id, d) in index {
        out.push_str(&format!("INDEX: {id} :: {d}\n"));
    }
    out.push_str(&format!("\n{instruction}\n```"));
    out
}

/// Builder replies that distil the golden run into one `tabular` takeaway.
pub fn evolve_run_script(run_id: &str) -> Vec<ScriptEntry> {
    vec![
        ScriptEntry::text(
            &format!("# Run digest {run_id}"),
            &l2_envelope(
                "tabular",
                "Toy run: difference-of-means scorer",
                "On a two-feature table a difference-of-means linear score reached the best validation AUC. \
                 Dropping x2 cost ranking quality, so keep every informative column in linear baselines.",
            ),
        ),
        ScriptEntry::text(
            "New document to fold in",
            &l1_envelope(
                &[
                    ("tabular-0001", "Dependency-free linear scoring baseline"),
                    ("tabular-0002", "Out-of-fold target encoding"),
                    ("tabular-0003", "Toy run: difference-of-means scorer"),
                ],
                TABULAR_INSTRUCTION.trim_end(),
            ),
        ),
    ]
}

const TABULAR_TOPIC: &str = "gradient boosted trees on tabular columns with target encoding of categorical features \
    careful cross validation folds stratified by label early stopping on a holdout split feature importance \
    from permutation tests lag features for temporal columns and missing value indicators for sparse fields \
    plus hyperparameter search over depth learning rate and leaf count";
const VISION_TOPIC: &str = "convolutional backbones pretrained on imagenet fine tuned with mixup and cutmix augmentation \
    random resized crops horizontal flips test time augmentation averaging logits over views cosine learning \
    rate schedule with warmup exponential moving average of weights and progressive resizing of input images \
    during the final epochs of training";
const NLP_TOPIC: &str = "transformer encoders fine tuned on tokenized text with a small learning rate layerwise decay \
    dynamic padding gradient accumulation and pseudo labelling of unlabeled sentences";

/// Splices source-specific words into a topic text at three spread positions.
fn topic_variant(base: &str, tag: &str) -> String {
    let mut words: Vec<String> = base.split_whitespace().map(String::from).collect();
    for (i, pos) in [30, 20, 10].into_iter().enumerate() {
        words.insert(pos, format!("{tag}x{i}"));
    }
    words.join(" ")
}

/// Ten sources: four tabular variants, two vision variants, one off-topic
/// page, and three identical NLP copies. Writes `corpus/` and
/// `l1_index.json` under `root` and returns their paths.
pub fn write_bootstrap_fixture(root: &Path) -> std::io::Result<(PathBuf, PathBuf)> {
    let corpus = root.join("corpus");
    std::fs::create_dir_all(&corpus)?;
    let mut docs: Vec<(&str, String)> = Vec::new();
    for id in ["t1", "t2", "t3", "t4"] {
        docs.push((id, topic_variant(TABULAR_TOPIC, id)));
    }
    for id in ["v1", "v2"] {
        docs.push((id, topic_variant(VISION_TOPIC, id)));
    }
    docs.push(("o1", "a recipe for sourdough bread with a long cold fermentation".into()));
    for id in ["n1", "n2", "n3"] {
        docs.push((id, NLP_TOPIC.to_string()));
    }
    let mut records = Vec::new();
    for (id, text) in &docs {
        std::fs::write(corpus.join(format!("{id}.txt")), text)?;
        records.push(json!({
            "source_id": id,
            "origin": "blog",
            "url": format!("https://example.org/{id}"),
            "path": format!("{id}.txt"),
            "fetched_at": "2026-03-01T00:00:00Z",
        }));
    }
    std::fs::write(corpus.join("corpus.json"), serde_json::to_string_pretty(&records)?)?;
    let index = root.join("l1_index.json");
    std::fs::write(&index, TAXONOMY_JSON)?;
    Ok((corpus, index))
}

/// Relevance verdicts, group confirmations, and builder replies for the
/// bootstrap fixture: three documents in three categories.
pub fn bootstrap_script() -> Vec<ScriptEntry> {
    let mut s: Vec<ScriptEntry> = ["t1", "t2", "t3", "t4", "v1", "v2", "n1"]
        .iter()
        .map(|id| ScriptEntry::text(&format!("<source id=\"{id}\""), "KEEP: modeling advice"))
        .collect();
    s.push(ScriptEntry::text("<source id=\"o1\"", "DROP: cooking"));
    s.push(ScriptEntry::text("<group id=\"group-0001\"", "KEEP: same topic"));
    s.push(ScriptEntry::text("<group id=\"group-0002\"", "KEEP: same topic"));
    let cats = [
        ("group-0001", "tabular", "Boosted trees on tables"),
        ("group-0002", "vision-classification", "Augmentation and fine-tuning"),
        ("group-0003", "nlp-classification", "Encoder fine-tuning"),
    ];
    for (g, cat, d) in cats {
        s.push(ScriptEntry::text(
            &format!("Source group {g}"),
            &l2_envelope(cat, d, &format!("Consolidated {cat} advice from the grouped sources.")),
        ));
    }
    for (_, cat, d) in cats {
        s.push(ScriptEntry::text(
            &format!("Category: {cat}\n"),
            &l1_envelope(&[(&format!("{cat}-0001"), d)], &format!("Work on {cat} starting from the indexed notes.")),
        ));
    }
    s
}
