use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::KnowledgeError;

pub const MAX_KEY_LEN: usize = 64;
pub const MAX_INDEX_DESCRIPTION_LINES: usize = 6;
pub const MAX_DOC_DESCRIPTION_LINES: usize = 3;
pub const DEFAULT_INSTRUCTION_LINE_CAP: usize = 400;

/// Category identifier: lowercase alphanumerics and hyphens, starting with an
/// alphanumeric, at most 64 characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CategoryKey(String);

impl CategoryKey {
    pub fn new(raw: impl Into<String>) -> Result<Self, KnowledgeError> {
        let raw = raw.into();
        let valid = !raw.is_empty()
            && raw.len() <= MAX_KEY_LEN
            && raw
                .chars()
                .next()
                .is_some_and(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
            && raw
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-');
        if valid {
            Ok(Self(raw))
        } else {
            Err(KnowledgeError::InvalidKey(raw))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for CategoryKey {
    type Error = KnowledgeError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<CategoryKey> for String {
    fn from(key: CategoryKey) -> Self {
        key.0
    }
}

impl fmt::Display for CategoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for CategoryKey {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryKind {
    ModalityTask,
    ModelingStrategy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct L1IndexEntry {
    pub key: CategoryKey,
    pub kind: CategoryKind,
    pub description: String,
}

/// One pointer in a category's document index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub doc_id: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct L1Value {
    pub key: CategoryKey,
    pub instruction: String,
    pub l2_index: Vec<IndexEntry>,
    pub revision: u64,
}

impl L1Value {
    pub fn indexes(&self, doc_id: &str) -> bool {
        self.l2_index.iter().any(|e| e.doc_id == doc_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvenanceKind {
    WebSources,
    RunTakeaway,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: ProvenanceKind,
    /// URLs / source ids for web sources, the run id for takeaways.
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct L2Document {
    pub key: CategoryKey,
    pub doc_id: String,
    pub body: String,
    pub description: String,
    pub provenance: Provenance,
    pub created_at: DateTime<Utc>,
}

/// A document before the store has assigned it a category slot and id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentDraft {
    pub body: String,
    pub description: String,
    pub provenance: Provenance,
    pub created_at: DateTime<Utc>,
}

impl DocumentDraft {
    pub fn validate(&self) -> Result<(), KnowledgeError> {
        if self.body.trim().is_empty() {
            return Err(KnowledgeError::Validation("document body is empty".into()));
        }
        check_description(&self.description, MAX_DOC_DESCRIPTION_LINES)?;
        if self.provenance.sources.iter().all(|s| s.trim().is_empty()) {
            return Err(KnowledgeError::Validation(
                "provenance must list at least one source".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_description(text: &str, max_lines: usize) -> Result<(), KnowledgeError> {
    if text.trim().is_empty() {
        return Err(KnowledgeError::Validation("description is empty".into()));
    }
    let lines = text.lines().count();
    if lines > max_lines {
        return Err(KnowledgeError::Validation(format!(
            "description has {lines} lines, limit is {max_lines}"
        )));
    }
    Ok(())
}

/// Formats `<key>-<seq>` with a four-digit zero-padded sequence.
pub fn format_doc_id(key: &CategoryKey, seq: u32) -> String {
    format!("{key}-{seq:04}")
}

/// Sequence number of a doc id produced by [`format_doc_id`].
pub fn doc_sequence(key: &CategoryKey, doc_id: &str) -> Option<u32> {
    doc_id
        .strip_prefix(key.as_str())?
        .strip_prefix('-')?
        .parse()
        .ok()
}
