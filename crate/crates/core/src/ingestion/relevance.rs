//! LLM relevance screening for single sources and for candidate groups.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IngestionError, SourceDocument, SourceGroup};
use crate::llm::{ChatMessage, LlmClient};
use crate::prompts::{PromptId, PromptSet};
use crate::util::{parallel_try_map, truncate_chars};

/// Sources longer than this are cut before classification.
const MAX_SOURCE_CHARS: usize = 24_000;
/// Per-member excerpt length in a group confirmation prompt.
const GROUP_EXCERPT_CHARS: usize = 4_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub keep: bool,
    pub reason: String,
}

/// First line of the form `KEEP: reason` or `DROP: reason`, case-insensitive.
pub fn parse_verdict(text: &str) -> Option<Verdict> {
    text.lines().map(str::trim).find_map(|line| {
        let (head, reason) = line.split_once(':')?;
        let keep = match head.trim().to_ascii_uppercase().as_str() {
            "KEEP" => true,
            "DROP" => false,
            _ => return None,
        };
        Some(Verdict {
            keep,
            reason: reason.trim().to_string(),
        })
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelevanceOutcome {
    pub kept: Vec<SourceDocument>,
    /// `(source_id, reason)` in input order.
    pub dropped: Vec<(String, String)>,
    /// Sources kept only because the verdict could not be parsed.
    pub fail_open: Vec<String>,
}

impl RelevanceOutcome {
    pub fn classified(&self) -> usize {
        self.kept.len() + self.dropped.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestionError> {
        crate::util::write_json(path, self).map_err(|e| IngestionError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn source_block(doc: &SourceDocument, cap: usize) -> String {
    format!(
        "<source id=\"{}\" origin=\"{}\">\n{}\n</source>",
        doc.source_id,
        doc.origin.location,
        truncate_chars(&doc.text, cap)
    )
}

fn system_prompt(prompts: &PromptSet, id: PromptId) -> Result<String, IngestionError> {
    prompts.render(id, &[]).map_err(|e| IngestionError::Config(e.to_string()))
}

/// One classification request per source, up to `concurrency` in flight.
/// Kept sources stay in input order. A malformed verdict keeps the source
/// and logs a warning. A backend failure aborts and carries every verdict
/// completed so far.
pub fn filter_relevance(
    docs: &[SourceDocument],
    client: &LlmClient,
    prompts: &PromptSet,
    concurrency: usize,
) -> Result<RelevanceOutcome, IngestionError> {
    let system = system_prompt(prompts, PromptId::Relevance)?;
    let results = parallel_try_map(docs, concurrency, |_, doc| {
        let messages = vec![
            ChatMessage::system(system.clone()),
            ChatMessage::user(source_block(doc, MAX_SOURCE_CHARS)),
        ];
        client.ask(messages).map(|text| parse_verdict(&text))
    });

    let mut outcome = RelevanceOutcome::default();
    let mut failure = None;
    for (doc, result) in docs.iter().zip(results) {
        match result {
            Some(Ok(Some(v))) if v.keep => outcome.kept.push(doc.clone()),
            Some(Ok(Some(v))) => outcome.dropped.push((doc.source_id.clone(), v.reason)),
            Some(Ok(None)) => {
                log::warn!("malformed relevance verdict for `{}`; keeping it", doc.source_id);
                outcome.fail_open.push(doc.source_id.clone());
                outcome.kept.push(doc.clone());
            }
            Some(Err(e)) if failure.is_none() => failure = Some((doc.source_id.clone(), e.to_string())),
            _ => {}
        }
    }
    match failure {
        None => Ok(outcome),
        Some((source_id, message)) => Err(IngestionError::RelevanceAborted {
            source_id,
            completed: outcome.classified(),
            message,
            partial: Box::new(outcome),
        }),
    }
}

/// Asks the backend whether each multi-member group really covers one topic.
/// Rejected groups are split into singletons; the result is renumbered
/// `group-0001`, `group-0002`, ... in order.
pub fn confirm_groups(
    groups: &[SourceGroup],
    docs: &[SourceDocument],
    client: &LlmClient,
    prompts: &PromptSet,
) -> Result<Vec<SourceGroup>, IngestionError> {
    let system = system_prompt(prompts, PromptId::GroupCheck)?;
    let by_id: BTreeMap<&str, &SourceDocument> = docs.iter().map(|d| (d.source_id.as_str(), d)).collect();
    let mut confirmed: Vec<Vec<String>> = Vec::new();
    for group in groups {
        if group.members.len() < 2 {
            confirmed.push(group.members.clone());
            continue;
        }
        let mut body = format!("<group id=\"{}\">\n", group.group_id);
        for member in &group.members {
            let doc = by_id.get(member.as_str()).ok_or_else(|| {
                IngestionError::Config(format!("group `{}` names unknown source `{member}`", group.group_id))
            })?;
            body.push_str(&source_block(doc, GROUP_EXCERPT_CHARS));
            body.push('\n');
        }
        body.push_str("</group>");
        let answer = client
            .ask(vec![ChatMessage::system(system.clone()), ChatMessage::user(body)])
            .map_err(|e| IngestionError::Config(format!("group check for `{}` failed: {e}", group.group_id)))?;
        match parse_verdict(&answer) {
            Some(v) if !v.keep => {
                log::info!("group `{}` rejected ({}); splitting", group.group_id, v.reason);
                confirmed.extend(group.members.iter().map(|m| vec![m.clone()]));
            }
            Some(_) => confirmed.push(group.members.clone()),
            None => {
                log::warn!("malformed group verdict for `{}`; keeping it", group.group_id);
                confirmed.push(group.members.clone());
            }
        }
    }
    Ok(confirmed
        .into_iter()
        .enumerate()
        .map(|(i, members)| SourceGroup {
            group_id: format!("group-{:04}", i + 1),
            members,
            centroid_hint: None,
        })
        .collect())
}
