//! Turns a pre-fetched corpus into deduplicated, relevance-filtered,
//! topically grouped inputs for the document builder.
//!
//! Pipeline order: [`dedup_corpus`] → [`filter_relevance`] →
//! [`cluster_sources`] → [`confirm_groups`].

mod embed;
mod minhash;
mod relevance;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use embed::{
    cluster_sources, cosine, embed, EmbeddingConfig, EmbeddingError, EmbeddingProvider, HashedBagOfWords,
    HttpEmbeddingProvider,
};
pub use minhash::{
    dedup_corpus, estimate_jaccard, minhash_signature, normalized_tokens, shingle, DedupConfig, DedupOutcome,
    DuplicateCluster, MinHashSignature, DEFAULT_DEDUP_THRESHOLD, DEFAULT_NUM_HASHES, DEFAULT_SHINGLE_SIZE,
};
pub use relevance::{confirm_groups, filter_relevance, parse_verdict, RelevanceOutcome, Verdict};

pub const CORPUS_MANIFEST: &str = "corpus.json";

#[derive(Debug, thiserror::Error)]
pub enum IngestionError {
    #[error("signatures are not comparable: (num_hashes, seed) {left:?} vs {right:?}")]
    IncomparableSignatures { left: (usize, u64), right: (usize, u64) },
    #[error("corpus error in {path}: {message}")]
    Corpus { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("embedding failed for `{source_id}`: {source}")]
    Embedding {
        source_id: String,
        #[source]
        source: EmbeddingError,
    },
    #[error("relevance classification aborted at `{source_id}` after {completed} verdict(s): {message}")]
    RelevanceAborted {
        source_id: String,
        completed: usize,
        message: String,
        partial: Box<RelevanceOutcome>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginKind {
    CompetitionWriteup,
    Blog,
    LibraryDoc,
    CodeRepo,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub kind: OriginKind,
    /// URL when known, otherwise the corpus-relative path.
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub source_id: String,
    pub text: String,
    pub origin: Origin,
    pub fetched_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceGroup {
    pub group_id: String,
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_hint: Option<String>,
}

impl SourceGroup {
    pub fn validate(&self) -> Result<(), String> {
        if self.members.is_empty() {
            return Err(format!("group `{}` has no members", self.group_id));
        }
        let unique: BTreeSet<&String> = self.members.iter().collect();
        if unique.len() != self.members.len() {
            return Err(format!("group `{}` lists a member twice", self.group_id));
        }
        Ok(())
    }
}

/// One record of `corpus.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub source_id: String,
    pub origin: OriginKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub path: String,
    pub fetched_at: DateTime<Utc>,
}

fn corpus_err(path: &Path, message: impl Into<String>) -> IngestionError {
    IngestionError::Corpus {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads `corpus.json` and every file it names, in manifest order.
pub fn load_corpus(dir: &Path) -> Result<Vec<SourceDocument>, IngestionError> {
    let manifest = dir.join(CORPUS_MANIFEST);
    let text = std::fs::read_to_string(&manifest).map_err(|e| IngestionError::Io {
        path: manifest.clone(),
        source: e,
    })?;
    let records: Vec<CorpusRecord> =
        serde_json::from_str(&text).map_err(|e| corpus_err(&manifest, e.to_string()))?;
    let mut seen = BTreeSet::new();
    let mut docs = Vec::with_capacity(records.len());
    for record in records {
        if !seen.insert(record.source_id.clone()) {
            return Err(corpus_err(&manifest, format!("duplicate source_id `{}`", record.source_id)));
        }
        let rel = Path::new(&record.path);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(corpus_err(&manifest, format!("path `{}` escapes the corpus", record.path)));
        }
        let file = dir.join(rel);
        let text = std::fs::read_to_string(&file).map_err(|e| IngestionError::Io { path: file.clone(), source: e })?;
        if normalized_tokens(&text).is_empty() {
            return Err(corpus_err(&file, format!("source `{}` is empty after normalization", record.source_id)));
        }
        docs.push(SourceDocument {
            source_id: record.source_id,
            text,
            origin: Origin {
                kind: record.origin,
                location: record.url.unwrap_or(record.path),
            },
            fetched_at: record.fetched_at,
        });
    }
    Ok(docs)
}

pub fn write_groups_file(path: &Path, groups: &[SourceGroup]) -> Result<(), IngestionError> {
    crate::util::write_json(path, &groups).map_err(|e| IngestionError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_groups_file(path: &Path) -> Result<Vec<SourceGroup>, IngestionError> {
    let text = std::fs::read_to_string(path).map_err(|e| IngestionError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let groups: Vec<SourceGroup> = serde_json::from_str(&text).map_err(|e| corpus_err(path, e.to_string()))?;
    for g in &groups {
        g.validate().map_err(|m| corpus_err(path, m))?;
    }
    Ok(groups)
}

#[cfg(test)]
pub(crate) mod test_docs {
    use super::*;
    use chrono::TimeZone;

    pub fn doc(id: &str, text: &str) -> SourceDocument {
        SourceDocument {
            source_id: id.to_string(),
            text: text.to_string(),
            origin: Origin {
                kind: OriginKind::Blog,
                location: format!("https://example.org/{id}"),
            },
            fetched_at: Utc.with_ymd_and_hms(2026, 3, 1, 0, 0, 0).unwrap(),
        }
    }
}
