//! The knowledge query tool and per-invocation loading state.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ToolReply;
use crate::knowledge::{render_l1_value, CategoryKey, KnowledgeBase, KnowledgeError};

/// What one agent invocation has pulled into its context so far.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadedKnowledge {
    pub categories: BTreeSet<CategoryKey>,
    pub documents: BTreeSet<(CategoryKey, String)>,
}

/// `{key}` loads a category's instruction and index; `{key, doc_id}` loads
/// one document body and requires its category to be loaded first.
pub fn query_tool(kb: &KnowledgeBase, loaded: &mut LoadedKnowledge, args: &Value) -> ToolReply {
    let Some(raw_key) = args.get("key").and_then(Value::as_str) else {
        return ToolReply::error("query needs a `key` argument");
    };
    let key = match kb.resolve_key(raw_key) {
        Ok(k) => k,
        Err(e) => return ToolReply::error(e.to_string()),
    };
    match args.get("doc_id").and_then(Value::as_str) {
        None => match kb.query_category(&key) {
            Ok(value) => {
                loaded.categories.insert(key);
                ToolReply::ok(render_l1_value(value))
            }
            Err(KnowledgeError::NotBuilt(_)) => {
                ToolReply::error(format!("category `{key}` exists but has no knowledge yet"))
            }
            Err(e) => ToolReply::error(e.to_string()),
        },
        Some(doc_id) => {
            if !loaded.categories.contains(&key) {
                return ToolReply::error(format!(
                    "load the category first: call query with key `{key}` before opening its documents"
                ));
            }
            let indexed = kb.query_category(&key).is_ok_and(|v| v.indexes(doc_id));
            if !indexed {
                return ToolReply::error(format!("document `{doc_id}` is not in the index of `{key}`"));
            }
            match kb.query_document(&key, doc_id) {
                Ok(doc) => {
                    let body = doc.body.clone();
                    loaded.documents.insert((key, doc_id.to_string()));
                    ToolReply::ok(body)
                }
                Err(e) => ToolReply::error(e.to_string()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::fixtures::{key, small_kb};
    use serde_json::json;

    #[test]
    fn category_form_renders_instruction_and_index() {
        let kb = small_kb();
        let mut loaded = LoadedKnowledge::default();
        let reply = query_tool(&kb, &mut loaded, &json!({"key": "tabular"}));
        assert!(!reply.is_error);
        assert!(reply.content.contains("Start with a GBDT baseline."));
        let index_lines = reply.content.lines().filter(|l| l.starts_with("- tabular-")).count();
        assert_eq!(index_lines, 2);
        assert!(loaded.categories.contains(&key("tabular")));
    }

    #[test]
    fn document_before_category_is_rejected() {
        let kb = small_kb();
        let mut loaded = LoadedKnowledge::default();
        let reply = query_tool(&kb, &mut loaded, &json!({"key": "tabular", "doc_id": "tabular-0001"}));
        assert!(reply.is_error);
        assert!(reply.content.contains("load the category first"));
        assert!(loaded.documents.is_empty());
    }

    #[test]
    fn document_after_category_is_verbatim() {
        let kb = small_kb();
        let mut loaded = LoadedKnowledge::default();
        query_tool(&kb, &mut loaded, &json!({"key": "tabular"}));
        let reply = query_tool(&kb, &mut loaded, &json!({"key": "tabular", "doc_id": "tabular-0001"}));
        assert_eq!(reply.content, "CatBoost with ordered boosting.\n");
        assert!(loaded.documents.contains(&(key("tabular"), "tabular-0001".into())));
    }

    #[test]
    fn unknown_key_and_doc_are_errors() {
        let kb = small_kb();
        let mut loaded = LoadedKnowledge::default();
        assert!(query_tool(&kb, &mut loaded, &json!({"key": "astrology"})).is_error);
        query_tool(&kb, &mut loaded, &json!({"key": "tabular"}));
        assert!(query_tool(&kb, &mut loaded, &json!({"key": "tabular", "doc_id": "tabular-0099"})).is_error);
        assert!(query_tool(&kb, &mut loaded, &json!({})).is_error);
    }
}
