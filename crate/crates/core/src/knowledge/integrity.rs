use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::types::{MAX_DOC_DESCRIPTION_LINES, MAX_INDEX_DESCRIPTION_LINES};
use super::{CategoryKey, KnowledgeBase, L1Value};

/// `Strict` requires full referential closure. `PendingEvolution` tolerates
/// stored documents that no L1 value indexes yet, which is the state between
/// inserting a document and the L1 builder absorbing it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrityMode {
    Strict,
    PendingEvolution,
}

impl std::str::FromStr for IntegrityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(Self::Strict),
            "pending" | "pending_evolution" | "pending-evolution" => Ok(Self::PendingEvolution),
            other => Err(format!("unknown integrity mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DuplicateCategory,
    EmptyCategoryDescription,
    CategoryDescriptionTooLong,
    UnknownCategory,
    ValueKeyMismatch,
    EmptyInstruction,
    DuplicateIndexEntry,
    DanglingPointer,
    OrphanDocument,
    DocumentKeyMismatch,
    EmptyBody,
    EmptyDescription,
    DescriptionTooLong,
    MissingProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub key: String,
    pub doc_id: Option<String>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.doc_id {
            Some(doc) => write!(f, "{:?} at ({}, {})", self.rule, self.key, doc),
            None => write!(f, "{:?} at ({})", self.rule, self.key),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub violations: Vec<Violation>,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, rule: Rule) -> usize {
        self.violations.iter().filter(|v| v.rule == rule).count()
    }

    fn push(&mut self, key: &str, doc_id: Option<&str>, rule: Rule) {
        self.violations.push(Violation {
            key: key.to_string(),
            doc_id: doc_id.map(str::to_string),
            rule,
        });
    }
}

impl fmt::Display for IntegrityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("no violations");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

fn too_long(text: &str, max: usize) -> bool {
    text.lines().count() > max
}

pub(super) fn validate(kb: &KnowledgeBase, mode: IntegrityMode) -> IntegrityReport {
    let mut report = IntegrityReport::default();
    let mut seen = BTreeSet::new();
    for entry in &kb.l1_index {
        let k = entry.key.as_str();
        if !seen.insert(k) {
            report.push(k, None, Rule::DuplicateCategory);
        }
        if entry.description.trim().is_empty() {
            report.push(k, None, Rule::EmptyCategoryDescription);
        } else if too_long(&entry.description, MAX_INDEX_DESCRIPTION_LINES) {
            report.push(k, None, Rule::CategoryDescriptionTooLong);
        }
    }

    for (key, value) in &kb.l1_values {
        if !kb.in_taxonomy(key) {
            report.push(key.as_str(), None, Rule::UnknownCategory);
        }
        if &value.key != key {
            report.push(key.as_str(), None, Rule::ValueKeyMismatch);
        }
        if value.instruction.trim().is_empty() {
            report.push(key.as_str(), None, Rule::EmptyInstruction);
        }
        check_value(kb, key, value, &mut report);
    }

    for (key, docs) in &kb.l2 {
        if !kb.in_taxonomy(key) {
            report.push(key.as_str(), None, Rule::UnknownCategory);
        }
        let value = kb.l1_values.get(key);
        for (doc_id, doc) in docs {
            let at = Some(doc_id.as_str());
            if &doc.key != key || &doc.doc_id != doc_id {
                report.push(key.as_str(), at, Rule::DocumentKeyMismatch);
            }
            if doc.body.trim().is_empty() {
                report.push(key.as_str(), at, Rule::EmptyBody);
            }
            if doc.description.trim().is_empty() {
                report.push(key.as_str(), at, Rule::EmptyDescription);
            } else if too_long(&doc.description, MAX_DOC_DESCRIPTION_LINES) {
                report.push(key.as_str(), at, Rule::DescriptionTooLong);
            }
            if doc.provenance.sources.iter().all(|s| s.trim().is_empty()) {
                report.push(key.as_str(), at, Rule::MissingProvenance);
            }
            let indexed = value.is_some_and(|v| v.indexes(doc_id));
            if !indexed && mode == IntegrityMode::Strict {
                report.push(key.as_str(), at, Rule::OrphanDocument);
            }
        }
    }
    report
}

/// Pointer checks for one L1 value against the stored documents.
pub(super) fn check_value(kb: &KnowledgeBase, key: &CategoryKey, value: &L1Value, report: &mut IntegrityReport) {
    let mut ids = BTreeSet::new();
    for entry in &value.l2_index {
        let at = Some(entry.doc_id.as_str());
        if !ids.insert(entry.doc_id.as_str()) {
            report.push(key.as_str(), at, Rule::DuplicateIndexEntry);
        }
        let resolves = kb.l2.get(key).is_some_and(|docs| docs.contains_key(&entry.doc_id));
        if !resolves {
            report.push(key.as_str(), at, Rule::DanglingPointer);
        }
    }
}
