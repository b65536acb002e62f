//! Document embeddings and greedy cosine clustering.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::minhash::{fnv1a, splitmix64};
use super::{normalized_tokens, IngestionError, SourceDocument, SourceGroup};

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("embedding protocol error: {0}")]
    Protocol(String),
    #[error("expected a {expected}-dimensional vector, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("provider returned a zero vector")]
    ZeroVector,
}

impl EmbeddingError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbeddingError::Transport(_))
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    /// Raw vector; normalization happens in [`embed`].
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbeddingError>;
}

/// Deterministic signed feature hashing of normalized tokens.
#[derive(Debug, Clone, Copy)]
pub struct HashedBagOfWords {
    pub dimension: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self { dimension: 256 }
    }
}

impl EmbeddingProvider for HashedBagOfWords {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let mut v = vec![0.0; self.dimension];
        for token in normalized_tokens(text) {
            let h = splitmix64(fnv1a(token.as_bytes()));
            let slot = (h % self.dimension as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[slot] += sign;
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub base_url: String,
    pub model: String,
    pub dimension: usize,
    pub api_key_env: Option<String>,
    pub timeout_seconds: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080/v1".into(),
            model: "default-embedding".into(),
            dimension: 256,
            api_key_env: None,
            timeout_seconds: 60.0,
        }
    }
}

/// `POST {base_url}/embeddings` with `{model, input}`; reads `data[0].embedding`.
pub struct HttpEmbeddingProvider {
    config: EmbeddingConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbeddingProvider {
    pub fn new(config: EmbeddingConfig) -> Result<Self, EmbeddingError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| EmbeddingError::Protocol(format!("environment variable `{var}` is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_seconds.max(1.0))))
            .build()
            .new_agent();
        Ok(Self { config, api_key, agent })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let url = format!("{}/embeddings", self.config.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(json!({"model": self.config.model, "input": text}))
            .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(EmbeddingError::Transport(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(EmbeddingError::Protocol(format!("HTTP {status}: {body}")));
        }
        let value: Value = serde_json::from_str(&body).map_err(|e| EmbeddingError::Protocol(e.to_string()))?;
        value
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbeddingError::Protocol("response has no data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| EmbeddingError::Protocol("non-numeric component".into())))
            .collect()
    }
}

/// Unit-norm embedding of the document text.
pub fn embed(doc: &SourceDocument, provider: &dyn EmbeddingProvider) -> Result<Vec<f64>, EmbeddingError> {
    let mut v = provider.embed_text(&doc.text)?;
    if v.len() != provider.dimension() {
        return Err(EmbeddingError::Dimension {
            expected: provider.dimension(),
            got: v.len(),
        });
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbeddingError::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    debug_assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= NORM_TOLERANCE);
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Embeds every document (up to `concurrency` at once) and then scans in
/// input order: a document joins the first group whose first member has
/// cosine ≥ `threshold`, otherwise it opens a new group.
pub fn cluster_sources(
    docs: &[SourceDocument],
    provider: &dyn EmbeddingProvider,
    threshold: f64,
    concurrency: usize,
) -> Result<Vec<SourceGroup>, IngestionError> {
    let results = crate::util::parallel_try_map(docs, concurrency, |_, doc| embed(doc, provider));
    let mut vectors = Vec::with_capacity(docs.len());
    for (doc, result) in docs.iter().zip(results) {
        match result {
            Some(Ok(v)) => vectors.push(v),
            Some(Err(source)) => {
                return Err(IngestionError::Embedding {
                    source_id: doc.source_id.clone(),
                    source,
                })
            }
            // unstarted items form a suffix after the first error
            None => unreachable!("unstarted item without a preceding error"),
        }
    }

    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, v) in vectors.iter().enumerate() {
        match groups.iter_mut().find(|(rep, _)| cosine(&vectors[*rep], v) >= threshold) {
            Some((_, members)) => members.push(i),
            None => groups.push((i, vec![i])),
        }
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(g, (_, members))| SourceGroup {
            group_id: format!("group-{:04}", g + 1),
            members: members.into_iter().map(|m| docs[m].source_id.clone()).collect(),
            centroid_hint: None,
        })
        .collect())
}
