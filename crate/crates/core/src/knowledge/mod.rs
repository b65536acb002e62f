//! Two-level knowledge lookup.
//!
//! The L1 index is a closed taxonomy of categories. Each built category has
//! an [`L1Value`]: a self-contained instruction plus an index of pointers to
//! the [`L2Document`]s stored under it. Agents read the index, then follow
//! pointers; nothing here does similarity search.

mod disk;
mod integrity;
mod types;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

pub use disk::{load_knowledge_base, read_l1_index_file, save_knowledge_base, StoreLock, MANIFEST_FILE};
pub use integrity::{IntegrityMode, IntegrityReport, Rule, Violation};
pub use types::{
    doc_sequence, format_doc_id, CategoryKey, CategoryKind, DocumentDraft, IndexEntry, L1IndexEntry,
    L1Value, L2Document, Provenance, ProvenanceKind, DEFAULT_INSTRUCTION_LINE_CAP,
    MAX_DOC_DESCRIPTION_LINES, MAX_INDEX_DESCRIPTION_LINES,
};

#[derive(Debug, thiserror::Error)]
pub enum KnowledgeError {
    #[error("invalid category key `{0}`")]
    InvalidKey(String),
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("integrity error: {0}")]
    Integrity(IntegrityReport),
    #[error("unknown category `{key}`; valid keys: {valid}")]
    UnknownCategory { key: String, valid: String },
    #[error("category `{0}` exists but has not been built yet")]
    NotBuilt(CategoryKey),
    #[error("document `{doc_id}` not found under `{key}`")]
    DocumentNotFound { key: CategoryKey, doc_id: String },
    #[error("category `{0}` is not part of the L1 taxonomy")]
    Taxonomy(String),
    #[error("revision conflict on `{key}`: current {current}, proposed {proposed}")]
    Conflict {
        key: CategoryKey,
        current: u64,
        proposed: u64,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("knowledge base at {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl KnowledgeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KnowledgeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = KnowledgeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub l1_index: Vec<L1IndexEntry>,
    pub l1_values: BTreeMap<CategoryKey, L1Value>,
    pub l2: BTreeMap<CategoryKey, BTreeMap<String, L2Document>>,
}

impl KnowledgeBase {
    /// An empty knowledge base over a fixed taxonomy.
    pub fn with_index(l1_index: Vec<L1IndexEntry>) -> Result<Self> {
        let kb = Self {
            l1_index,
            ..Default::default()
        };
        let report = kb.validate_integrity(IntegrityMode::Strict);
        if !report.is_clean() {
            return Err(KnowledgeError::Integrity(report));
        }
        Ok(kb)
    }

    pub fn index_entry(&self, key: &CategoryKey) -> Option<&L1IndexEntry> {
        self.l1_index.iter().find(|e| &e.key == key)
    }

    pub fn in_taxonomy(&self, key: &CategoryKey) -> bool {
        self.index_entry(key).is_some()
    }

    pub fn keys(&self) -> impl Iterator<Item = &CategoryKey> {
        self.l1_index.iter().map(|e| &e.key)
    }

    fn unknown(&self, key: &str) -> KnowledgeError {
        KnowledgeError::UnknownCategory {
            key: key.to_string(),
            valid: self.keys().map(CategoryKey::as_str).collect::<Vec<_>>().join(", "),
        }
    }

    /// Resolves a raw key string against the taxonomy.
    pub fn resolve_key(&self, raw: &str) -> Result<CategoryKey> {
        match CategoryKey::new(raw) {
            Ok(key) if self.in_taxonomy(&key) => Ok(key),
            _ => Err(self.unknown(raw)),
        }
    }

    /// Category-level lookup: the instruction plus pointers, no bodies.
    pub fn query_category(&self, key: &CategoryKey) -> Result<&L1Value> {
        if !self.in_taxonomy(key) {
            return Err(self.unknown(key.as_str()));
        }
        self.l1_values
            .get(key)
            .ok_or_else(|| KnowledgeError::NotBuilt(key.clone()))
    }

    pub fn query_document(&self, key: &CategoryKey, doc_id: &str) -> Result<&L2Document> {
        if !self.in_taxonomy(key) {
            return Err(self.unknown(key.as_str()));
        }
        self.l2
            .get(key)
            .and_then(|docs| docs.get(doc_id))
            .ok_or_else(|| KnowledgeError::DocumentNotFound {
                key: key.clone(),
                doc_id: doc_id.to_string(),
            })
    }

    pub fn documents(&self, key: &CategoryKey) -> impl Iterator<Item = &L2Document> {
        self.l2.get(key).into_iter().flat_map(|docs| docs.values())
    }

    pub fn document_count(&self) -> usize {
        self.l2.values().map(BTreeMap::len).sum()
    }

    pub fn next_doc_id(&self, key: &CategoryKey) -> String {
        let next = self
            .l2
            .get(key)
            .map(|docs| {
                docs.keys()
                    .filter_map(|id| doc_sequence(key, id))
                    .max()
                    .unwrap_or(0)
            })
            .unwrap_or(0)
            + 1;
        format_doc_id(key, next)
    }

    /// Stores a document under a fresh sequential id. The document is not
    /// indexed until the category's L1 value is replaced.
    pub fn insert_document(&mut self, key: &CategoryKey, draft: DocumentDraft) -> Result<String> {
        if !self.in_taxonomy(key) {
            return Err(KnowledgeError::Taxonomy(key.to_string()));
        }
        draft.validate()?;
        let doc_id = self.next_doc_id(key);
        let doc = L2Document {
            key: key.clone(),
            doc_id: doc_id.clone(),
            body: draft.body,
            description: draft.description,
            provenance: draft.provenance,
            created_at: draft.created_at,
        };
        self.l2.entry(key.clone()).or_default().insert(doc_id.clone(), doc);
        Ok(doc_id)
    }

    pub fn replace_l1_value(&mut self, key: &CategoryKey, value: L1Value) -> Result<()> {
        if !self.in_taxonomy(key) {
            return Err(KnowledgeError::Taxonomy(key.to_string()));
        }
        if &value.key != key {
            return Err(KnowledgeError::Validation(format!(
                "value key `{}` does not match target `{key}`",
                value.key
            )));
        }
        if value.instruction.trim().is_empty() {
            return Err(KnowledgeError::Validation("instruction is empty".into()));
        }
        let mut report = IntegrityReport::default();
        integrity::check_value(self, key, &value, &mut report);
        if !report.is_clean() {
            return Err(KnowledgeError::Integrity(report));
        }
        let current = self.l1_values.get(key).map_or(0, |v| v.revision);
        if value.revision <= current {
            return Err(KnowledgeError::Conflict {
                key: key.clone(),
                current,
                proposed: value.revision,
            });
        }
        self.l1_values.insert(key.clone(), value);
        Ok(())
    }

    /// Removes one stored document that no L1 value indexes yet. Used to roll
    /// back an insert whose evolution failed.
    pub fn remove_pending_document(&mut self, key: &CategoryKey, doc_id: &str) -> Result<L2Document> {
        if self.l1_values.get(key).is_some_and(|v| v.indexes(doc_id)) {
            return Err(KnowledgeError::Validation(format!(
                "`{doc_id}` is indexed and cannot be removed"
            )));
        }
        let docs = self.l2.get_mut(key).ok_or_else(|| KnowledgeError::DocumentNotFound {
            key: key.clone(),
            doc_id: doc_id.to_string(),
        })?;
        let doc = docs.remove(doc_id).ok_or_else(|| KnowledgeError::DocumentNotFound {
            key: key.clone(),
            doc_id: doc_id.to_string(),
        })?;
        if docs.is_empty() {
            self.l2.remove(key);
        }
        Ok(doc)
    }

    /// The L1 index as shown to every agent: keys and descriptions only.
    pub fn render_l1_index(&self) -> String {
        let mut out = String::new();
        for entry in &self.l1_index {
            let kind = match entry.kind {
                CategoryKind::ModalityTask => "task",
                CategoryKind::ModelingStrategy => "strategy",
            };
            let description: Vec<&str> = entry.description.lines().map(str::trim).collect();
            out.push_str(&format!("- {} [{kind}]: {}\n", entry.key, description.join(" ")));
        }
        out
    }

    /// Drops every stored document under `key` that no L1 value indexes.
    /// Returns the removed ids.
    pub fn discard_unindexed(&mut self, key: &CategoryKey) -> Vec<String> {
        let indexed: Vec<String> = self
            .l1_values
            .get(key)
            .map(|v| v.l2_index.iter().map(|e| e.doc_id.clone()).collect())
            .unwrap_or_default();
        let mut removed = Vec::new();
        if let Some(docs) = self.l2.get_mut(key) {
            docs.retain(|id, _| {
                let keep = indexed.contains(id);
                if !keep {
                    removed.push(id.clone());
                }
                keep
            });
            if docs.is_empty() {
                self.l2.remove(key);
            }
        }
        removed
    }

    pub fn validate_integrity(&self, mode: IntegrityMode) -> IntegrityReport {
        integrity::validate(self, mode)
    }

    /// Every source identifier recorded in document provenance.
    pub fn provenance_sources(&self, kind: ProvenanceKind) -> impl Iterator<Item = &str> {
        self.l2
            .values()
            .flat_map(|docs| docs.values())
            .filter(move |d| d.provenance.kind == kind)
            .flat_map(|d| d.provenance.sources.iter().map(String::as_str))
    }
}

/// Deterministic text form of an L1 value: instruction, then one pointer per
/// line.
pub fn render_l1_value(value: &L1Value) -> String {
    let mut out = format!("# {} (revision {})\n\n{}", value.key, value.revision, value.instruction.trim_end());
    out.push_str("\n\n## Documents\n");
    if value.l2_index.is_empty() {
        out.push_str("(none)\n");
    }
    for entry in &value.l2_index {
        let description: Vec<&str> = entry.description.lines().map(str::trim).collect();
        out.push_str(&format!("- {} :: {}\n", entry.doc_id, description.join(" ")));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnowledgeLimits {
    pub instruction_line_cap: usize,
}

impl Default for KnowledgeLimits {
    fn default() -> Self {
        Self {
            instruction_line_cap: DEFAULT_INSTRUCTION_LINE_CAP,
        }
    }
}

/// Shared handle: many concurrent readers, one writer at a time.
#[derive(Debug, Default)]
pub struct KnowledgeStore {
    inner: RwLock<KnowledgeBase>,
    limits: KnowledgeLimits,
}

impl KnowledgeStore {
    pub fn new(kb: KnowledgeBase) -> Self {
        Self::with_limits(kb, KnowledgeLimits::default())
    }

    pub fn with_limits(kb: KnowledgeBase, limits: KnowledgeLimits) -> Self {
        Self {
            inner: RwLock::new(kb),
            limits,
        }
    }

    pub fn limits(&self) -> KnowledgeLimits {
        self.limits
    }

    pub fn read(&self) -> RwLockReadGuard<'_, KnowledgeBase> {
        self.inner.read().expect("knowledge store poisoned")
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, KnowledgeBase> {
        self.inner.write().expect("knowledge store poisoned")
    }

    pub fn snapshot(&self) -> KnowledgeBase {
        self.read().clone()
    }

    pub fn into_inner(self) -> KnowledgeBase {
        self.inner.into_inner().expect("knowledge store poisoned")
    }

    pub fn query_category(&self, key: &CategoryKey) -> Result<L1Value> {
        self.read().query_category(key).cloned()
    }

    pub fn query_document(&self, key: &CategoryKey, doc_id: &str) -> Result<L2Document> {
        self.read().query_document(key, doc_id).cloned()
    }

    pub fn insert_document(&self, key: &CategoryKey, draft: DocumentDraft) -> Result<String> {
        self.write().insert_document(key, draft)
    }

    /// Replaces an L1 value, additionally enforcing the instruction line cap.
    pub fn replace_l1_value(&self, key: &CategoryKey, value: L1Value) -> Result<()> {
        let lines = value.instruction.lines().count();
        if lines > self.limits.instruction_line_cap {
            return Err(KnowledgeError::Validation(format!(
                "instruction has {lines} lines, cap is {}",
                self.limits.instruction_line_cap
            )));
        }
        self.write().replace_l1_value(key, value)
    }

    pub fn validate_integrity(&self, mode: IntegrityMode) -> IntegrityReport {
        self.read().validate_integrity(mode)
    }
}
