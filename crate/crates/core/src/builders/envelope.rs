//! The fenced reply format shared by both builders.
//!
//! ```text
//! CATEGORY: <key>              (document builder only)
//! DESCRIPTION: <one line>
//! INDEX: <doc_id> :: <desc>    (instruction builder, repeated)
//!
//! <body>
//! ```
//!
//! The block opens at the first fence line and closes at the last one, so
//! bodies may contain fenced code of their own.

use crate::knowledge::IndexEntry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct L2Envelope {
    pub category: String,
    pub description: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct L1Envelope {
    pub index: Vec<IndexEntry>,
    pub instruction: String,
}

struct Raw {
    category: Option<String>,
    description: Option<String>,
    index: Vec<IndexEntry>,
    body: String,
}

fn fenced_block(text: &str) -> Result<Vec<&str>, String> {
    let lines: Vec<&str> = text.lines().collect();
    let is_fence = |l: &&str| l.trim_start().starts_with("```");
    let open = lines.iter().position(is_fence).ok_or("no fenced block found")?;
    let close = lines.iter().rposition(is_fence).filter(|c| *c > open).ok_or("fenced block is not closed")?;
    Ok(lines[open + 1..close].to_vec())
}

fn parse_raw(text: &str) -> Result<Raw, String> {
    let block = fenced_block(text)?;
    let mut raw = Raw {
        category: None,
        description: None,
        index: Vec::new(),
        body: String::new(),
    };
    let mut i = 0;
    while i < block.len() && !block[i].trim().is_empty() {
        let line = block[i].trim();
        let (field, value) = line
            .split_once(':')
            .ok_or_else(|| format!("header line {} is not `FIELD: value`: {line:?}", i + 1))?;
        let value = value.trim().to_string();
        match field.trim() {
            "CATEGORY" => raw.category = Some(value),
            "DESCRIPTION" => raw.description = Some(value),
            "INDEX" => {
                let (doc_id, description) = value
                    .split_once("::")
                    .ok_or_else(|| format!("INDEX line needs `<doc_id> :: <description>`: {line:?}"))?;
                raw.index.push(IndexEntry {
                    doc_id: doc_id.trim().to_string(),
                    description: description.trim().to_string(),
                });
            }
            other => return Err(format!("unknown header field `{other}`")),
        }
        i += 1;
    }
    raw.body = block[i.min(block.len())..].join("\n").trim().to_string();
    if !raw.body.is_empty() {
        raw.body.push('\n');
    }
    Ok(raw)
}

pub fn parse_l2_envelope(text: &str) -> Result<L2Envelope, String> {
    let raw = parse_raw(text)?;
    if !raw.index.is_empty() {
        return Err("INDEX lines are not allowed in a document reply".into());
    }
    let category = raw.category.filter(|c| !c.is_empty()).ok_or("missing CATEGORY line")?;
    let description = raw.description.filter(|d| !d.is_empty()).ok_or("missing DESCRIPTION line")?;
    if raw.body.is_empty() {
        return Err("document body is empty".into());
    }
    Ok(L2Envelope {
        category,
        description,
        body: raw.body,
    })
}

/// A `DESCRIPTION` line is tolerated and ignored.
pub fn parse_l1_envelope(text: &str) -> Result<L1Envelope, String> {
    let raw = parse_raw(text)?;
    if raw.category.is_some() {
        return Err("CATEGORY is not allowed in an instruction reply".into());
    }
    if raw.body.is_empty() {
        return Err("instruction is empty".into());
    }
    if let Some(e) = raw.index.iter().find(|e| e.doc_id.is_empty() || e.description.is_empty()) {
        return Err(format!("INDEX entry {:?} needs both a doc id and a description", e.doc_id));
    }
    Ok(L1Envelope {
        index: raw.index,
        instruction: raw.body,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_envelope_with_nested_code() {
        let reply = "Sure.\n```\nCATEGORY: tabular\nDESCRIPTION: GBDT tips\n\nUse this:\n```python\nprint(1)\n```\nDone.\n```\ntrailing chatter";
        let env = parse_l2_envelope(reply).unwrap();
        assert_eq!(env.category, "tabular");
        assert_eq!(env.description, "GBDT tips");
        assert_eq!(env.body, "Use this:\n```python\nprint(1)\n```\nDone.\n");
    }

    #[test]
    fn l2_envelope_failures() {
        assert!(parse_l2_envelope("no fence at all").is_err());
        assert!(parse_l2_envelope("```\nDESCRIPTION: x\n\nbody\n```").is_err());
        assert!(parse_l2_envelope("```\nCATEGORY: a\nDESCRIPTION: x\n\n\n```").is_err());
        assert!(parse_l2_envelope("```\nCATEGORY: a\nWHAT: x\n\nbody\n```").is_err());
    }

    #[test]
    fn l1_envelope_index_lines() {
        let reply = "```\nINDEX: tabular-0001 :: CatBoost recipe\nINDEX: tabular-0002 :: Target: encoding\n\nStart simple.\n```";
        let env = parse_l1_envelope(reply).unwrap();
        assert_eq!(env.index.len(), 2);
        assert_eq!(env.index[1].description, "Target: encoding");
        assert_eq!(env.instruction, "Start simple.\n");
        assert!(parse_l1_envelope("```\nINDEX: x\n\nbody\n```").is_err());
    }
}
