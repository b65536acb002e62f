//! Task files and the settings file shared by CLI subcommands.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::budget::{BudgetError, RunBudget};
use super::OrchestratorError;
use crate::agents::{AgentConfig, TaskBrief};
use crate::builders::{BuilderConfig, PipelineConfig};
use crate::ingestion::{EmbeddingConfig, EmbeddingProvider, HashedBagOfWords, HttpEmbeddingProvider};
use crate::llm::{ChatBackend, HttpBackend, HttpBackendConfig, LlmClient, RetryPolicy, ScriptedBackend};
use crate::prompts::PromptSet;

pub const DEFAULT_REPOS: usize = 7;

/// One task: what to solve, where the data lives, and how it is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub description: String,
    #[serde(default)]
    pub data_dir: PathBuf,
    pub metric_name: String,
    pub higher_is_better: bool,
}

impl TaskSpec {
    /// Reads a TOML task file. A relative `data_dir` is taken relative to
    /// the file's folder.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let mut spec: TaskSpec = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if !spec.data_dir.as_os_str().is_empty() && spec.data_dir.is_relative() {
            spec.data_dir = path.parent().unwrap_or(Path::new(".")).join(&spec.data_dir);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.task_id.trim().is_empty() || self.task_id.contains(['/', '\\']) {
            return Err(invalid(format!("task_id `{}` must be a non-empty name", self.task_id)));
        }
        if self.description.trim().is_empty() {
            return Err(invalid("the task description is empty"));
        }
        if self.metric_name.trim().is_empty() {
            return Err(invalid("metric_name is empty"));
        }
        if std::fs::read_dir(&self.data_dir).is_err() {
            return Err(invalid(format!("data_dir {} is not a readable folder", self.data_dir.display())));
        }
        Ok(())
    }

    /// With an absolute data path, as agents need it.
    pub fn brief(&self) -> TaskBrief {
        TaskBrief {
            task_id: self.task_id.clone(),
            description: self.description.clone(),
            metric_name: self.metric_name.clone(),
            higher_is_better: self.higher_is_better,
            data_dir: std::fs::canonicalize(&self.data_dir).unwrap_or_else(|_| self.data_dir.clone()),
        }
    }
}

fn invalid(message: impl Into<String>) -> OrchestratorError {
    OrchestratorError::InvalidInput(message.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetSettings {
    pub wall_clock_seconds: f64,
    /// Defaults to `max(5% of budget, 60s)`.
    pub aggregator_reserve_seconds: Option<f64>,
    pub execute_timeout_seconds: f64,
}

impl Default for BudgetSettings {
    fn default() -> Self {
        Self {
            wall_clock_seconds: 24.0 * 3600.0,
            aggregator_reserve_seconds: None,
            execute_timeout_seconds: 3600.0,
        }
    }
}

fn secs(value: f64, what: &'static str) -> Result<Duration, BudgetError> {
    Duration::try_from_secs_f64(value).map_err(|_| BudgetError::NotPositive(what))
}

impl BudgetSettings {
    pub fn to_budget(&self) -> Result<RunBudget, BudgetError> {
        RunBudget::new(
            secs(self.wall_clock_seconds, "wall-clock budget")?,
            self.aggregator_reserve_seconds.map(|s| secs(s, "aggregator reserve")).transpose()?,
            secs(self.execute_timeout_seconds, "execute timeout")?,
        )
    }
}

/// Everything the settings file can carry; every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub backend: HttpBackendConfig,
    pub retry: RetryPolicy,
    /// Absent means the built-in hashed bag-of-words embedder.
    pub embedding: Option<EmbeddingConfig>,
    pub budget: BudgetSettings,
    pub agents: AgentConfig,
    pub builder: BuilderConfig,
    pub pipeline: PipelineConfig,
    pub repos: usize,
    pub prompts_dir: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            backend: HttpBackendConfig::default(),
            retry: RetryPolicy::default(),
            embedding: None,
            budget: BudgetSettings::default(),
            agents: AgentConfig::default(),
            builder: BuilderConfig::default(),
            pipeline: PipelineConfig::default(),
            repos: DEFAULT_REPOS,
            prompts_dir: None,
        }
    }
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn prompts(&self) -> Result<PromptSet, OrchestratorError> {
        match &self.prompts_dir {
            Some(dir) => PromptSet::with_overrides(dir).map_err(|e| invalid(e.to_string())),
            None => Ok(PromptSet::builtin()),
        }
    }

    /// The scripted backend when a script is given, else the HTTP one.
    pub fn client(&self, script: Option<&Path>) -> Result<LlmClient, OrchestratorError> {
        let backend: Arc<dyn ChatBackend> = match script {
            Some(path) => Arc::new(ScriptedBackend::load(path).map_err(|e| invalid(e.to_string()))?),
            None => Arc::new(HttpBackend::new(self.backend.clone()).map_err(|e| invalid(e.to_string()))?),
        };
        let mut client = LlmClient::new(backend).with_retry(self.retry);
        client.model = self.backend.model.clone();
        client.temperature = self.backend.temperature;
        client.max_output = self.backend.max_output;
        Ok(client)
    }

    pub fn embedder(&self) -> Result<Box<dyn EmbeddingProvider>, OrchestratorError> {
        Ok(match &self.embedding {
            Some(cfg) => Box::new(HttpEmbeddingProvider::new(cfg.clone()).map_err(|e| invalid(e.to_string()))?),
            None => Box::new(HashedBagOfWords::default()),
        })
    }
}
