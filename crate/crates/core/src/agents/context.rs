//! Context assembly under a token budget.
//!
//! Order: role prompt, rendered L1 index, task, optional repository
//! summary, then history. Over budget, the oldest history steps go first,
//! then the repository summary is cut; the prompt and index never shrink.

use crate::llm::{estimate_message_tokens, ChatMessage};
use crate::util::head_tail;

/// Default per-call input budget in estimated tokens.
pub const DEFAULT_CONTEXT_BUDGET: usize = 160_000;
/// Estimates are inflated by this factor before comparing with the budget.
pub const SAFETY_MARGIN: f64 = 1.2;

const MIN_REPO_CHARS: usize = 400;

#[derive(Debug, thiserror::Error)]
#[error("context needs {needed} estimated tokens (with margin) but the budget is {budget}")]
pub struct ContextError {
    pub needed: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextParts {
    pub system: String,
    pub l1_index: String,
    pub task: String,
    pub repo: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub messages: Vec<ChatMessage>,
    pub elided_steps: usize,
    pub repo_truncated: bool,
    pub estimated_tokens: usize,
}

fn with_margin(tokens: usize) -> usize {
    (tokens as f64 * SAFETY_MARGIN).ceil() as usize
}

pub fn index_message(l1_index: &str) -> String {
    format!(
        "Knowledge index. Load a category with query(key) and a document with query(key, doc_id).\n\n{}",
        l1_index.trim_end()
    )
}

pub fn elision_marker(steps: usize) -> String {
    format!("[{steps} earlier step(s) elided to fit the context budget]")
}

fn fixed(parts: &ContextParts, repo: Option<&str>) -> Vec<ChatMessage> {
    let mut out = vec![
        ChatMessage::system(parts.system.clone()),
        ChatMessage::user(index_message(&parts.l1_index)),
        ChatMessage::user(parts.task.clone()),
    ];
    if let Some(r) = repo {
        out.push(ChatMessage::user(r.to_string()));
    }
    out
}

/// `history` holds one entry per step: the assistant turn and its tool
/// results, kept together so call ids always resolve. The newest step is
/// never elided.
pub fn assemble_context(
    parts: &ContextParts,
    history: &[Vec<ChatMessage>],
    budget: usize,
) -> Result<Assembled, ContextError> {
    let step_cost: Vec<usize> = history.iter().map(|s| estimate_message_tokens(s)).collect();
    let suffix_cost = |k: usize| -> usize { step_cost[k..].iter().sum() };
    let marker_cost = |k: usize| if k == 0 { 0 } else { estimate_message_tokens(&[ChatMessage::user(elision_marker(k))]) };
    let min_keep = usize::from(!history.is_empty());

    let build = |repo: Option<&str>, k: usize| -> Vec<ChatMessage> {
        let mut msgs = fixed(parts, repo);
        if k > 0 {
            msgs.push(ChatMessage::user(elision_marker(k)));
        }
        msgs.extend(history[k..].iter().flatten().cloned());
        msgs
    };

    let fixed_cost = estimate_message_tokens(&fixed(parts, parts.repo.as_deref()));
    let max_drop = history.len() - min_keep;
    for k in 0..=max_drop {
        let total = fixed_cost + marker_cost(k) + suffix_cost(k);
        if with_margin(total) <= budget {
            return Ok(Assembled {
                messages: build(parts.repo.as_deref(), k),
                elided_steps: k,
                repo_truncated: false,
                estimated_tokens: total,
            });
        }
    }

    // history is down to its newest step; cut the repository summary next
    let k = max_drop;
    let rest = estimate_message_tokens(&fixed(parts, None)) + marker_cost(k) + suffix_cost(k);
    if let Some(repo) = &parts.repo {
        // message overhead 4 tokens, ~4 chars per token
        let spare_tokens = (budget as f64 / SAFETY_MARGIN).floor() as usize;
        let room = spare_tokens.saturating_sub(rest + 4) * 4;
        if room >= MIN_REPO_CHARS {
            let half = room.saturating_sub(80) / 2;
            let (cut, _) = head_tail(repo, half, half);
            let total = rest + estimate_message_tokens(&[ChatMessage::user(cut.clone())]);
            if with_margin(total) <= budget {
                return Ok(Assembled {
                    messages: build(Some(&cut), k),
                    elided_steps: k,
                    repo_truncated: true,
                    estimated_tokens: total,
                });
            }
        }
    }
    Err(ContextError {
        needed: with_margin(rest + parts.repo.as_deref().map_or(0, |_| 4 + MIN_REPO_CHARS / 4)),
        budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ToolCall;

    fn parts(repo: Option<&str>) -> ContextParts {
        ContextParts {
            system: "You are the designer.".into(),
            l1_index: "- tabular [task]: Tabular data\n- vision [task]: Images".into(),
            task: "Predict churn.".into(),
            repo: repo.map(String::from),
        }
    }

    fn step(i: usize, payload: usize) -> Vec<ChatMessage> {
        let call = ToolCall {
            id: format!("call-{i}"),
            name: "read_1".into(),
            args: serde_json::json!({"path": "plan.md"}),
        };
        vec![
            ChatMessage::assistant_tool_calls(vec![call]),
            ChatMessage::tool_result(format!("call-{i}"), format!("step-{i} {}", "x".repeat(payload))),
        ]
    }

    #[test]
    fn order_is_prompt_index_task_repo_history() {
        let a = assemble_context(&parts(Some("Repository 1")), &[step(1, 10)], 10_000).unwrap();
        assert_eq!(a.messages.len(), 6);
        assert!(a.messages[1].content.contains("- vision [task]"));
        assert_eq!(a.messages[2].content, "Predict churn.");
        assert_eq!(a.messages[3].content, "Repository 1");
        assert_eq!(a.elided_steps, 0);
    }

    #[test]
    fn oldest_steps_elided_first() {
        let history: Vec<_> = (1..=10).map(|i| step(i, 400)).collect();
        // each step costs about 120 tokens; the budget leaves room for ~4
        let a = assemble_context(&parts(None), &history, 700).unwrap();
        assert!(a.elided_steps > 0);
        let text: String = a.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        assert!(text.contains(&elision_marker(a.elided_steps)));
        for i in 1..=a.elided_steps {
            assert!(!text.contains(&format!("step-{i} ")), "step {i} should be gone");
        }
        for i in a.elided_steps + 1..=10 {
            assert!(text.contains(&format!("step-{i} ")), "step {i} should survive");
        }
        assert!(with_margin(a.estimated_tokens) <= 700);
        assert_eq!(a.estimated_tokens, estimate_message_tokens(&a.messages));
    }

    #[test]
    fn repo_summary_cut_after_history() {
        let repo = format!("Repository 1\n{}", "y".repeat(20_000));
        let a = assemble_context(&parts(Some(&repo)), &[step(1, 10), step(2, 10)], 2_000).unwrap();
        assert_eq!(a.elided_steps, 1);
        assert!(a.repo_truncated);
        assert!(a.messages[3].content.starts_with("Repository 1"));
        assert!(with_margin(estimate_message_tokens(&a.messages)) <= 2_000);
    }

    #[test]
    fn irreducible_overflow_is_an_error() {
        let mut p = parts(None);
        p.system = "z".repeat(10_000);
        assert!(assemble_context(&p, &[], 1_000).is_err());
    }
}
