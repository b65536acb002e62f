//! The two knowledge-builder agents and the bootstrap pipeline.
//!
//! The document builder turns a source group or a finished run into one
//! L2 document; the instruction builder writes (bootstrap) or edits
//! (evolve) a category's L1 value. Every builder conversation gets exactly
//! one corrective re-prompt before it fails hard.

mod digest;
mod envelope;
mod pipeline;

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use digest::{build_run_digest, cap_chars, tail_lines, RunDigest, DEFAULT_DIGEST_CAP, FINAL_REPORT, RUN_FILE};
pub use envelope::{parse_l1_envelope, parse_l2_envelope, L1Envelope, L2Envelope};
pub use pipeline::{
    bootstrap_knowledge_base, default_artifacts_dir, GroupFailure, PipelineConfig, PipelineReport, GROUPS_FILE,
    PIPELINE_REPORT_FILE, RELEVANCE_PARTIAL_FILE,
};

use crate::ingestion::{IngestionError, SourceDocument, SourceGroup};
use crate::knowledge::{
    render_l1_value, CategoryKey, DocumentDraft, IndexEntry, KnowledgeBase, KnowledgeError, KnowledgeStore, L1Value,
    Provenance, ProvenanceKind,
};
use crate::llm::{ChatMessage, LlmClient, LlmError};
use crate::prompts::{PromptError, PromptId, PromptSet};
use crate::util::truncate_chars;

/// Marker text that opens every corrective re-prompt.
pub const CORRECTION_MARKER: &str = "Your previous reply was rejected";

#[derive(Debug, thiserror::Error)]
pub enum BuilderError {
    #[error("builder reply rejected twice: first `{first}`, then `{second}`")]
    Rejected { first: String, second: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Ingestion(#[from] IngestionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("the pipeline produced an empty knowledge base ({failures} group or category failure(s))")]
    EmptyKnowledgeBase { failures: usize },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T, E = BuilderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuilderConfig {
    /// Cap on a run digest handed to the document builder.
    pub digest_cap_chars: usize,
    /// Cap per source text in a document-builder prompt.
    pub source_cap_chars: usize,
    /// Cap per document body in an instruction-builder prompt.
    pub document_cap_chars: usize,
    pub instruction_line_cap: usize,
    /// Stamp every draft with this time instead of the wall clock.
    pub fixed_timestamp: Option<DateTime<Utc>>,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        Self {
            digest_cap_chars: DEFAULT_DIGEST_CAP,
            source_cap_chars: 16_000,
            document_cap_chars: 8_000,
            instruction_line_cap: crate::knowledge::DEFAULT_INSTRUCTION_LINE_CAP,
            fixed_timestamp: None,
        }
    }
}

/// What [`integrate_document`] did with a freshly inserted document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    Bootstrapped,
    Evolved,
}

#[derive(Clone, Debug)]
pub struct Builder {
    pub client: LlmClient,
    pub prompts: PromptSet,
    pub config: BuilderConfig,
}

fn source_block(doc: &SourceDocument, cap: usize) -> String {
    format!(
        "<source id=\"{}\" origin=\"{}\">\n{}\n</source>\n",
        doc.source_id,
        doc.origin.location,
        truncate_chars(doc.text.trim(), cap)
    )
}

fn one_line(text: &str) -> String {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ")
}

impl Builder {
    pub fn new(client: LlmClient) -> Self {
        Self {
            client,
            prompts: PromptSet::builtin(),
            config: BuilderConfig::default(),
        }
    }

    fn now(&self) -> DateTime<Utc> {
        self.config.fixed_timestamp.unwrap_or_else(Utc::now)
    }

    /// One conversation; `check` turns a reply into a value or a reason.
    /// A rejected first reply earns one corrective turn.
    fn converse<T>(
        &self,
        system: String,
        user: String,
        mut check: impl FnMut(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let mut messages = vec![ChatMessage::system(system), ChatMessage::user(user)];
        let reply = self.client.ask(messages.clone())?;
        let first = match check(&reply) {
            Ok(v) => return Ok(v),
            Err(reason) => reason,
        };
        log::warn!("builder reply rejected ({first}); re-prompting once");
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(format!(
            "{CORRECTION_MARKER}: {first}\nReply again with a single fenced block in the required format."
        )));
        let reply = self.client.ask(messages)?;
        check(&reply).map_err(|second| BuilderError::Rejected { first, second })
    }

    fn l2_system(&self, kb: &KnowledgeBase) -> Result<String> {
        if kb.l1_index.is_empty() {
            return Err(BuilderError::Precondition("the L1 index is empty".into()));
        }
        Ok(self
            .prompts
            .render(PromptId::L2Builder, &[("l1_index", kb.render_l1_index().trim_end())])?)
    }

    fn l2_check(kb: &KnowledgeBase) -> impl FnMut(&str) -> std::result::Result<(CategoryKey, String, String), String> + '_ {
        move |reply| {
            let env = parse_l2_envelope(reply)?;
            let key = kb
                .resolve_key(&env.category)
                .map_err(|_| format!("category `{}` is not in the index; use one of the listed keys", env.category))?;
            Ok((key, env.description, env.body))
        }
    }

    /// Consolidates one source group into a draft document. Nothing is
    /// written to the store.
    pub fn build_l2_from_sources(
        &self,
        group: &SourceGroup,
        members: &[&SourceDocument],
        kb: &KnowledgeBase,
    ) -> Result<(CategoryKey, DocumentDraft)> {
        if group.members.is_empty() || members.is_empty() {
            return Err(BuilderError::Precondition(format!("group `{}` is empty", group.group_id)));
        }
        let system = self.l2_system(kb)?;
        let mut user = format!("Source group {} ({} source(s)):\n\n", group.group_id, members.len());
        for doc in members {
            user.push_str(&source_block(doc, self.config.source_cap_chars));
        }
        let (key, description, body) = self.converse(system, user, Self::l2_check(kb))?;
        let draft = DocumentDraft {
            body,
            description: one_line(&description),
            provenance: Provenance {
                kind: ProvenanceKind::WebSources,
                sources: members.iter().map(|d| d.source_id.clone()).collect(),
            },
            created_at: self.now(),
        };
        draft.validate()?;
        Ok((key, draft))
    }

    /// Distils a completed run directory into a takeaway draft.
    pub fn build_l2_from_rundir(&self, run_dir: &Path, kb: &KnowledgeBase) -> Result<(CategoryKey, DocumentDraft)> {
        let digest = build_run_digest(run_dir, self.config.digest_cap_chars).map_err(BuilderError::Precondition)?;
        let system = self.l2_system(kb)?;
        let (key, description, body) = self.converse(system, digest.text, Self::l2_check(kb))?;
        let draft = DocumentDraft {
            body,
            description: one_line(&description),
            provenance: Provenance {
                kind: ProvenanceKind::RunTakeaway,
                sources: vec![digest.run_id],
            },
            created_at: self.now(),
        };
        draft.validate()?;
        Ok((key, draft))
    }

    fn check_instruction(&self, instruction: &str) -> std::result::Result<(), String> {
        let lines = instruction.lines().count();
        if lines > self.config.instruction_line_cap {
            return Err(format!(
                "the instruction has {lines} lines; the cap is {}",
                self.config.instruction_line_cap
            ));
        }
        Ok(())
    }

    fn check_index(index: &[IndexEntry], expected: &BTreeSet<String>) -> std::result::Result<(), String> {
        let mut seen = BTreeSet::new();
        for e in index {
            if !seen.insert(e.doc_id.clone()) {
                return Err(format!("document `{}` is listed twice", e.doc_id));
            }
            if !expected.contains(&e.doc_id) {
                return Err(format!("document `{}` does not exist in this category", e.doc_id));
            }
        }
        let missing: Vec<&String> = expected.iter().filter(|id| !seen.contains(*id)).collect();
        if !missing.is_empty() {
            return Err(format!("the index must list every document; missing {missing:?}"));
        }
        Ok(())
    }

    fn l1_system(&self, mode: &str) -> Result<String> {
        let cap = self.config.instruction_line_cap.to_string();
        Ok(self
            .prompts
            .render(PromptId::L1Builder, &[("mode", mode), ("line_cap", &cap)])?)
    }

    fn document_block(&self, doc: &crate::knowledge::L2Document) -> String {
        format!(
            "<document id=\"{}\" description=\"{}\">\n{}\n</document>\n",
            doc.doc_id,
            one_line(&doc.description),
            truncate_chars(doc.body.trim(), self.config.document_cap_chars)
        )
    }

    /// Writes a category's first L1 value from its stored documents.
    /// Returns `None` (category stays unbuilt) when there are no documents.
    pub fn bootstrap_l1(&self, store: &KnowledgeStore, key: &CategoryKey) -> Result<Option<L1Value>> {
        let (entry, docs) = {
            let kb = store.read();
            let entry = kb
                .index_entry(key)
                .cloned()
                .ok_or_else(|| BuilderError::Knowledge(KnowledgeError::Taxonomy(key.to_string())))?;
            if kb.l1_values.contains_key(key) {
                return Err(BuilderError::Precondition(format!("`{key}` already has an L1 value")));
            }
            (entry, kb.documents(key).cloned().collect::<Vec<_>>())
        };
        if docs.is_empty() {
            log::warn!("category `{key}` has no documents; leaving it unbuilt");
            return Ok(None);
        }
        let expected: BTreeSet<String> = docs.iter().map(|d| d.doc_id.clone()).collect();
        let mut user = format!(
            "Category: {key}\nDescription: {}\n\nDocuments ({}):\n\n",
            one_line(&entry.description),
            docs.len()
        );
        for doc in &docs {
            user.push_str(&self.document_block(doc));
        }
        let env = self.converse(self.l1_system("bootstrap")?, user, |reply| {
            let env = parse_l1_envelope(reply)?;
            Self::check_index(&env.index, &expected)?;
            self.check_instruction(&env.instruction)?;
            Ok(env)
        })?;
        let value = L1Value {
            key: key.clone(),
            instruction: env.instruction,
            l2_index: env.index,
            revision: 1,
        };
        store.replace_l1_value(key, value.clone())?;
        Ok(Some(value))
    }

    /// Folds one newly stored document into an existing L1 value. Prior
    /// index entries must all survive.
    pub fn evolve_l1(&self, store: &KnowledgeStore, key: &CategoryKey, new_doc_id: &str) -> Result<L1Value> {
        let (current, doc) = {
            let kb = store.read();
            let current = kb
                .l1_values
                .get(key)
                .cloned()
                .ok_or_else(|| BuilderError::Precondition(format!("`{key}` has no L1 value to evolve")))?;
            let doc = kb.query_document(key, new_doc_id)?.clone();
            if current.indexes(new_doc_id) {
                return Err(BuilderError::Precondition(format!("`{new_doc_id}` is already indexed")));
            }
            (current, doc)
        };
        let mut expected: BTreeSet<String> = current.l2_index.iter().map(|e| e.doc_id.clone()).collect();
        expected.insert(new_doc_id.to_string());
        let user = format!(
            "Current high-level instruction and index:\n\n{}\nNew document to fold in:\n\n{}",
            render_l1_value(&current),
            self.document_block(&doc)
        );
        let env = self.converse(self.l1_system("evolve")?, user, |reply| {
            let env = parse_l1_envelope(reply)?;
            let kept: BTreeSet<&str> = env.index.iter().map(|e| e.doc_id.as_str()).collect();
            if let Some(lost) = current.l2_index.iter().find(|e| !kept.contains(e.doc_id.as_str())) {
                return Err(format!("existing index entry `{}` was dropped; keep every entry", lost.doc_id));
            }
            Self::check_index(&env.index, &expected)?;
            self.check_instruction(&env.instruction)?;
            Ok(env)
        })?;
        let value = L1Value {
            key: key.clone(),
            instruction: env.instruction,
            l2_index: env.index,
            revision: current.revision + 1,
        };
        store.replace_l1_value(key, value.clone())?;
        Ok(value)
    }

    /// Zero-or-one dispatch: bootstrap an unbuilt category, evolve a built
    /// one. On failure the inserted document is removed again.
    pub fn integrate_document(&self, store: &KnowledgeStore, key: &CategoryKey, doc_id: &str) -> Result<Integration> {
        let built = store.read().l1_values.contains_key(key);
        let outcome = if built {
            self.evolve_l1(store, key, doc_id).map(|_| Integration::Evolved)
        } else {
            match self.bootstrap_l1(store, key) {
                Ok(Some(_)) => Ok(Integration::Bootstrapped),
                Ok(None) => Err(BuilderError::Precondition(format!("`{key}` has no documents"))),
                Err(e) => Err(e),
            }
        };
        if outcome.is_err() {
            let mut kb = store.write();
            if !kb.l1_values.get(key).is_some_and(|v| v.indexes(doc_id)) {
                let _ = kb.remove_pending_document(key, doc_id);
            }
        }
        outcome
    }
}
