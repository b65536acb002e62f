//! Corpus to knowledge base, end to end.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Builder, BuilderError, Result};
use crate::ingestion::{
    cluster_sources, confirm_groups, dedup_corpus, filter_relevance, load_corpus, write_groups_file, DedupConfig,
    EmbeddingProvider, IngestionError, SourceDocument,
};
use crate::knowledge::{
    read_l1_index_file, save_knowledge_base, IntegrityMode, KnowledgeBase, KnowledgeError, KnowledgeStore,
};
use crate::util::parallel_map;

pub const PIPELINE_REPORT_FILE: &str = "pipeline_report.json";
pub const RELEVANCE_PARTIAL_FILE: &str = "relevance.partial.json";
pub const GROUPS_FILE: &str = "groups.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dedup: DedupConfig,
    pub cosine_threshold: f64,
    pub relevance_concurrency: usize,
    pub embed_concurrency: usize,
    pub builder_concurrency: usize,
    /// Ask the backend to confirm each multi-member group.
    pub confirm_groups: bool,
    /// Where groups, partial verdicts and the report go. Defaults to a
    /// `<out>.pipeline` sibling so knowledge-base saves never clobber them.
    pub artifacts_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dedup: DedupConfig::default(),
            cosine_threshold: 0.7,
            relevance_concurrency: 4,
            embed_concurrency: 4,
            builder_concurrency: 2,
            confirm_groups: true,
            artifacts_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupFailure {
    /// A group id, or `category:<key>` for an instruction-builder failure.
    pub stage_item: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub ingested: usize,
    pub deduped: usize,
    pub dropped: usize,
    pub fail_open: usize,
    pub groups: usize,
    pub docs: usize,
    pub categories_built: usize,
    pub categories_skipped: Vec<String>,
    pub failures: Vec<GroupFailure>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BuilderError {
    BuilderError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn default_artifacts_dir(out_dir: &Path) -> PathBuf {
    let mut name = out_dir.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "kb".into());
    name.push(".pipeline");
    out_dir.with_file_name(name)
}

/// Builds a fresh knowledge base under `out_dir` from a corpus directory.
/// Per-group and per-category failures are recorded and skipped; an empty
/// result is an error and nothing is saved.
pub fn bootstrap_knowledge_base(
    corpus_dir: &Path,
    l1_index_file: &Path,
    out_dir: &Path,
    builder: &Builder,
    provider: &dyn EmbeddingProvider,
    config: &PipelineConfig,
) -> Result<(KnowledgeBase, PipelineReport)> {
    let index = read_l1_index_file(l1_index_file)?;
    let docs = load_corpus(corpus_dir)?;
    let artifacts = config.artifacts_dir.clone().unwrap_or_else(|| default_artifacts_dir(out_dir));
    std::fs::create_dir_all(&artifacts).map_err(|e| io_err(&artifacts, e))?;
    let mut report = PipelineReport {
        ingested: docs.len(),
        ..Default::default()
    };

    let dedup = dedup_corpus(&docs, &config.dedup)?;
    report.deduped = dedup.dropped_count();
    log::info!("dedup: {} ingested, {} near-duplicates removed", docs.len(), report.deduped);

    let relevance = match filter_relevance(&dedup.kept, &builder.client, &builder.prompts, config.relevance_concurrency) {
        Ok(r) => r,
        Err(IngestionError::RelevanceAborted {
            source_id,
            completed,
            message,
            partial,
        }) => {
            let path = artifacts.join(RELEVANCE_PARTIAL_FILE);
            partial.save(&path)?;
            log::error!("relevance aborted; partial verdicts saved to {}", path.display());
            return Err(IngestionError::RelevanceAborted {
                source_id,
                completed,
                message,
                partial,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    report.dropped = relevance.dropped.len();
    report.fail_open = relevance.fail_open.len();
    let relevant = relevance.kept;

    let mut groups = cluster_sources(&relevant, provider, config.cosine_threshold, config.embed_concurrency)?;
    if config.confirm_groups {
        groups = confirm_groups(&groups, &relevant, &builder.client, &builder.prompts)?;
    }
    write_groups_file(&artifacts.join(GROUPS_FILE), &groups)?;
    report.groups = groups.len();

    let kb = KnowledgeBase::with_index(index)?;
    let by_id: BTreeMap<&str, &SourceDocument> = relevant.iter().map(|d| (d.source_id.as_str(), d)).collect();
    let built = parallel_map(&groups, config.builder_concurrency, |_, group| {
        let members: Vec<&SourceDocument> = group.members.iter().filter_map(|m| by_id.get(m.as_str()).copied()).collect();
        builder.build_l2_from_sources(group, &members, &kb)
    });

    // insertion in group order keeps doc ids deterministic
    let store = KnowledgeStore::with_limits(
        kb,
        crate::knowledge::KnowledgeLimits {
            instruction_line_cap: builder.config.instruction_line_cap,
        },
    );
    let mut touched = BTreeSet::new();
    for (group, result) in groups.iter().zip(built) {
        match result.and_then(|(key, draft)| Ok((key.clone(), store.insert_document(&key, draft)?))) {
            Ok((key, _)) => {
                touched.insert(key);
                report.docs += 1;
            }
            Err(e) => {
                log::warn!("{}: {e}", group.group_id);
                report.failures.push(GroupFailure {
                    stage_item: group.group_id.clone(),
                    message: e.to_string(),
                });
            }
        }
    }

    for key in &touched {
        match builder.bootstrap_l1(&store, key) {
            Ok(Some(_)) => report.categories_built += 1,
            Ok(None) => report.categories_skipped.push(key.to_string()),
            Err(e) => {
                log::warn!("category {key}: {e}");
                let discarded = store.write().discard_unindexed(key);
                report.docs -= discarded.len();
                report.failures.push(GroupFailure {
                    stage_item: format!("category:{key}"),
                    message: e.to_string(),
                });
            }
        }
    }

    let kb = store.into_inner();
    if kb.document_count() == 0 {
        return Err(BuilderError::EmptyKnowledgeBase {
            failures: report.failures.len(),
        });
    }
    let integrity = kb.validate_integrity(IntegrityMode::Strict);
    if !integrity.is_clean() {
        return Err(KnowledgeError::Integrity(integrity).into());
    }
    save_knowledge_base(&kb, out_dir)?;
    let report_path = artifacts.join(PIPELINE_REPORT_FILE);
    crate::util::write_json(&report_path, &report).map_err(|e| io_err(&report_path, e))?;
    Ok((kb, report))
}
