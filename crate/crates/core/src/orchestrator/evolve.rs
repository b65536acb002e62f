//! Post-run and web-content knowledge evolution.
//!
//! Both streams load the store under its writer lock, work on an in-memory
//! copy, and save only a strict-valid result, so a failure leaves the files
//! on disk untouched.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::builders::{Builder, GroupFailure, Integration, RUN_FILE};
use crate::ingestion::{load_corpus, read_groups_file, SourceDocument};
use crate::knowledge::{
    load_knowledge_base, save_knowledge_base, IntegrityMode, KnowledgeBase, KnowledgeError, KnowledgeLimits,
    KnowledgeStore, ProvenanceKind, StoreLock,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionEntry {
    pub item: String,
    pub category: String,
    pub doc_id: String,
    pub revision_before: Option<u64>,
    pub revision_after: u64,
    pub integration: Integration,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolutionReport {
    pub entries: Vec<EvolutionEntry>,
    pub failures: Vec<GroupFailure>,
    pub docs_before: usize,
    pub docs_after: usize,
}

fn open_store(kb_path: &Path, builder: &Builder) -> Result<(StoreLock, KnowledgeStore), OrchestratorError> {
    let lock = StoreLock::acquire(kb_path)?;
    let kb = load_knowledge_base(kb_path)?;
    let report = kb.validate_integrity(IntegrityMode::Strict);
    if !report.is_clean() {
        return Err(KnowledgeError::Integrity(report).into());
    }
    let limits = KnowledgeLimits {
        instruction_line_cap: builder.config.instruction_line_cap,
    };
    Ok((lock, KnowledgeStore::with_limits(kb, limits)))
}

fn finish(store: KnowledgeStore, kb_path: &Path, report: &mut EvolutionReport) -> Result<(), OrchestratorError> {
    let kb = store.into_inner();
    report.docs_after = kb.document_count();
    if report.entries.is_empty() {
        return Ok(());
    }
    save_knowledge_base(&kb, kb_path)?;
    Ok(())
}

/// Inserts one draft and folds it into its category's L1 value.
fn integrate(
    builder: &Builder,
    store: &KnowledgeStore,
    item: &str,
    key: &crate::knowledge::CategoryKey,
    draft: crate::knowledge::DocumentDraft,
) -> Result<EvolutionEntry, OrchestratorError> {
    let revision_before = store.read().l1_values.get(key).map(|v| v.revision);
    let doc_id = store.insert_document(key, draft)?;
    let integration = builder.integrate_document(store, key, &doc_id)?;
    let revision_after = store.read().l1_values.get(key).map_or(0, |v| v.revision);
    Ok(EvolutionEntry {
        item: item.to_string(),
        category: key.to_string(),
        doc_id,
        revision_before,
        revision_after,
        integration,
    })
}

fn run_id_of(run_dir: &Path) -> Result<String, OrchestratorError> {
    let path = run_dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| OrchestratorError::InvalidInput(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| OrchestratorError::InvalidInput(format!("{}: {e}", path.display())))?;
    value["run_id"]
        .as_str()
        .filter(|s| !s.is_empty())
        .map(String::from)
        .ok_or_else(|| OrchestratorError::InvalidInput(format!("{} has no run_id", path.display())))
}

/// True when some takeaway document already cites this run.
pub fn already_evolved(kb: &KnowledgeBase, run_id: &str) -> bool {
    kb.provenance_sources(ProvenanceKind::RunTakeaway).any(|s| s == run_id)
}

/// Distils one completed run into exactly one new document. Refused when
/// the run was already distilled into this knowledge base.
pub fn post_run_evolve(run_dir: &Path, kb_path: &Path, builder: &Builder) -> Result<EvolutionReport, OrchestratorError> {
    let run_id = run_id_of(run_dir)?;
    let (_lock, store) = open_store(kb_path, builder)?;
    if already_evolved(&store.read(), &run_id) {
        return Err(OrchestratorError::AlreadyEvolved(run_id));
    }
    let mut report = EvolutionReport {
        docs_before: store.read().document_count(),
        ..Default::default()
    };
    let (key, draft) = builder.build_l2_from_rundir(run_dir, &store.read())?;
    report.entries.push(integrate(builder, &store, &run_id, &key, draft)?);
    let integrity = store.validate_integrity(IntegrityMode::Strict);
    if !integrity.is_clean() {
        return Err(KnowledgeError::Integrity(integrity).into());
    }
    finish(store, kb_path, &mut report)?;
    Ok(report)
}

/// Folds grouped web sources into the store, one group at a time. A failed
/// group is listed and skipped; the others still land.
pub fn evolve_from_web(
    groups_file: &Path,
    corpus_dir: &Path,
    kb_path: &Path,
    builder: &Builder,
) -> Result<EvolutionReport, OrchestratorError> {
    let groups = read_groups_file(groups_file)?;
    let (_lock, store) = open_store(kb_path, builder)?;
    let mut report = EvolutionReport {
        docs_before: store.read().document_count(),
        ..Default::default()
    };
    if groups.is_empty() {
        report.docs_after = report.docs_before;
        return Ok(report);
    }
    let corpus = load_corpus(corpus_dir)?;
    let by_id: BTreeMap<&str, &SourceDocument> = corpus.iter().map(|d| (d.source_id.as_str(), d)).collect();

    for group in &groups {
        let outcome = (|| {
            let members: Vec<&SourceDocument> = group
                .members
                .iter()
                .map(|m| {
                    by_id
                        .get(m.as_str())
                        .copied()
                        .ok_or_else(|| OrchestratorError::InvalidInput(format!("source `{m}` is not in the corpus")))
                })
                .collect::<Result<_, _>>()?;
            let (key, draft) = builder.build_l2_from_sources(group, &members, &store.read())?;
            integrate(builder, &store, &group.group_id, &key, draft)
        })();
        match outcome {
            Ok(entry) => report.entries.push(entry),
            Err(e) => {
                log::warn!("{}: {e}", group.group_id);
                report.failures.push(GroupFailure {
                    stage_item: group.group_id.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    let integrity = store.validate_integrity(IntegrityMode::Strict);
    if !integrity.is_clean() {
        return Err(KnowledgeError::Integrity(integrity).into());
    }
    finish(store, kb_path, &mut report)?;
    Ok(report)
}
