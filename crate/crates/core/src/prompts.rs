//! Prompt templates.
//!
//! Templates are text assets with `{{name}}` placeholders and a first-line
//! version tag (`<!-- prompt: <name> v<N> -->`). The defaults are compiled
//! in; a directory of same-named `.md` files overrides them, so changing a
//! prompt never needs a code change.

use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PromptId {
    Setup,
    Manager,
    Designer,
    Coder,
    Tuner,
    Aggregator,
    L2Builder,
    L1Builder,
    Relevance,
    GroupCheck,
}

impl PromptId {
    pub const ALL: [PromptId; 10] = [
        PromptId::Setup,
        PromptId::Manager,
        PromptId::Designer,
        PromptId::Coder,
        PromptId::Tuner,
        PromptId::Aggregator,
        PromptId::L2Builder,
        PromptId::L1Builder,
        PromptId::Relevance,
        PromptId::GroupCheck,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptId::Setup => "setup.md",
            PromptId::Manager => "manager.md",
            PromptId::Designer => "designer.md",
            PromptId::Coder => "coder.md",
            PromptId::Tuner => "tuner.md",
            PromptId::Aggregator => "aggregator.md",
            PromptId::L2Builder => "l2_builder.md",
            PromptId::L1Builder => "l1_builder.md",
            PromptId::Relevance => "relevance.md",
            PromptId::GroupCheck => "group_check.md",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptId::Setup => include_str!("../assets/prompts/setup.md"),
            PromptId::Manager => include_str!("../assets/prompts/manager.md"),
            PromptId::Designer => include_str!("../assets/prompts/designer.md"),
            PromptId::Coder => include_str!("../assets/prompts/coder.md"),
            PromptId::Tuner => include_str!("../assets/prompts/tuner.md"),
            PromptId::Aggregator => include_str!("../assets/prompts/aggregator.md"),
            PromptId::L2Builder => include_str!("../assets/prompts/l2_builder.md"),
            PromptId::L1Builder => include_str!("../assets/prompts/l1_builder.md"),
            PromptId::Relevance => include_str!("../assets/prompts/relevance.md"),
            PromptId::GroupCheck => include_str!("../assets/prompts/group_check.md"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("prompt {0:?}: unresolved placeholder `{{{{{1}}}}}`")]
    Unresolved(PromptId, String),
    #[error("reading prompt override {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<PromptId, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self {
            templates: PromptId::ALL
                .iter()
                .map(|id| (*id, id.builtin().to_string()))
                .collect(),
        }
    }

    /// Builtins overridden by any `<name>.md` present in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for id in PromptId::ALL {
            let path = dir.join(id.file_name());
            if path.is_file() {
                let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                set.templates.insert(id, text);
            }
        }
        Ok(set)
    }

    pub fn set(&mut self, id: PromptId, text: impl Into<String>) {
        self.templates.insert(id, text.into());
    }

    pub fn raw(&self, id: PromptId) -> &str {
        &self.templates[&id]
    }

    /// Version tag from the first line, if present (e.g. `designer v1`).
    pub fn version(&self, id: PromptId) -> Option<&str> {
        let first = self.raw(id).lines().next()?;
        first
            .strip_prefix("<!-- prompt:")?
            .strip_suffix("-->")
            .map(str::trim)
    }

    /// Substitutes every `{{name}}`; any placeholder left over is an error.
    pub fn render(&self, id: PromptId, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut text = self.raw(id).to_string();
        for (name, value) in vars {
            text = text.replace(&format!("{{{{{name}}}}}"), value);
        }
        if let Some(start) = text.find("{{") {
            if let Some(len) = text[start..].find("}}") {
                return Err(PromptError::Unresolved(id, text[start + 2..start + len].to_string()));
            }
        }
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_carries_a_version_tag() {
        let set = PromptSet::builtin();
        for id in PromptId::ALL {
            assert!(set.version(id).is_some_and(|v| v.ends_with("v1")), "{id:?}");
        }
    }

    #[test]
    fn render_substitutes_and_rejects_leftovers() {
        let set = PromptSet::builtin();
        let text = set.render(PromptId::Manager, &[("n_repos", "7")]).unwrap();
        assert!(text.contains("over 7 parallel"));
        assert!(matches!(
            set.render(PromptId::Manager, &[]),
            Err(PromptError::Unresolved(PromptId::Manager, ref name)) if name == "n_repos"
        ));
    }

    #[test]
    fn directory_overrides_builtins() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("designer.md"), "<!-- prompt: designer v2 -->\ncustom").unwrap();
        let set = PromptSet::with_overrides(dir.path()).unwrap();
        assert_eq!(set.version(PromptId::Designer), Some("designer v2"));
        assert_eq!(set.version(PromptId::Coder), Some("coder v1"));
    }
}
