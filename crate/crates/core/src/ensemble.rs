//! Rank transformation and hill-climbing rank-average blending.
//!
//! Fitting is greedy ensemble selection with replacement: each round adds one
//! model to a bag, and the weights are the bag counts divided by the number
//! of rounds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const DEFAULT_ROUNDS: usize = 14;
const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("non-finite value at position {index}{}", model.as_ref().map(|m| format!(" of model `{m}`")).unwrap_or_default())]
    NonFinite { model: Option<String>, index: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duplicate model id `{0}`")]
    DuplicateModel(String),
    #[error("unknown model id `{0}`")]
    UnknownModel(String),
    #[error("labels are required for fitting")]
    MissingLabels,
    #[error("metric `{metric}` cannot be computed: {reason}")]
    Metric { metric: &'static str, reason: String },
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("rounds must be at least 1")]
    ZeroRounds,
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

pub type Result<T, E = EnsembleError> = std::result::Result<T, E>;

/// Average 1-based ranks divided by the length.
pub fn rank_transform(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(EnsembleError::Shape("cannot rank an empty sequence".into()));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(EnsembleError::NonFinite { model: None, index });
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = avg / n as f64;
        }
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub model_ids: Vec<String>,
    /// One row of `rows()` predictions per model.
    pub values: Vec<Vec<f64>>,
    pub labels: Option<Vec<f64>>,
}

impl PredictionMatrix {
    pub fn new(model_ids: Vec<String>, values: Vec<Vec<f64>>, labels: Option<Vec<f64>>) -> Result<Self> {
        if model_ids.is_empty() {
            return Err(EnsembleError::Shape("at least one model is required".into()));
        }
        if model_ids.len() != values.len() {
            return Err(EnsembleError::Shape(format!(
                "{} model ids for {} prediction rows",
                model_ids.len(),
                values.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &model_ids {
            if !seen.insert(id) {
                return Err(EnsembleError::DuplicateModel(id.clone()));
            }
        }
        let rows = values[0].len();
        if rows == 0 {
            return Err(EnsembleError::Shape("at least one row is required".into()));
        }
        for (id, row) in model_ids.iter().zip(&values) {
            if row.len() != rows {
                return Err(EnsembleError::Shape(format!("model `{id}` has {} rows, expected {rows}", row.len())));
            }
            if let Some(index) = row.iter().position(|v| !v.is_finite()) {
                return Err(EnsembleError::NonFinite {
                    model: Some(id.clone()),
                    index,
                });
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != rows {
                return Err(EnsembleError::Shape(format!("{} labels for {rows} rows", labels.len())));
            }
            if let Some(index) = labels.iter().position(|v| !v.is_finite()) {
                return Err(EnsembleError::NonFinite {
                    model: Some("labels".into()),
                    index,
                });
            }
        }
        Ok(Self {
            model_ids,
            values,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.values[0].len()
    }

    pub fn models(&self) -> usize {
        self.model_ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Spearman rank correlation, higher is better.
    RankCorrelation,
    /// Mean absolute error, lower is better.
    MeanAbsoluteError,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::RankCorrelation => "rank_correlation",
            Metric::MeanAbsoluteError => "mean_absolute_error",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::RankCorrelation)
    }

    pub fn evaluate(self, predictions: &[f64], labels: &[f64]) -> Result<f64> {
        if predictions.len() != labels.len() || predictions.is_empty() {
            return Err(EnsembleError::Metric {
                metric: self.name(),
                reason: format!("{} predictions for {} labels", predictions.len(), labels.len()),
            });
        }
        match self {
            Metric::RankCorrelation => {
                let a = rank_transform(predictions)?;
                let b = rank_transform(labels)?;
                pearson(&a, &b).ok_or_else(|| EnsembleError::Metric {
                    metric: self.name(),
                    reason: "predictions or labels are constant".into(),
                })
            }
            Metric::MeanAbsoluteError => Ok(predictions
                .iter()
                .zip(labels)
                .map(|(p, y)| (p - y).abs())
                .sum::<f64>()
                / labels.len() as f64),
        }
    }

    /// `a` strictly better than `b` under this metric's direction.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rank_correlation" | "spearman" => Ok(Metric::RankCorrelation),
            "mean_absolute_error" | "mae" => Ok(Metric::MeanAbsoluteError),
            other => Err(format!("unknown metric `{other}` (expected rank_correlation or mean_absolute_error)")),
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendWeights {
    /// `(model_id, weight)` in matrix order.
    pub weights: Vec<(String, f64)>,
}

impl BlendWeights {
    pub fn new(weights: Vec<(String, f64)>) -> Result<Self> {
        if weights.is_empty() {
            return Err(EnsembleError::Weights("no weights".into()));
        }
        if let Some((id, w)) = weights.iter().find(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(EnsembleError::Weights(format!("weight {w} for `{id}` is not a non-negative number")));
        }
        let sum: f64 = weights.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(EnsembleError::Weights(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn get(&self, id: &str) -> f64 {
        self.weights.iter().find(|(m, _)| m == id).map_or(0.0, |(_, w)| *w)
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|(_, w)| w).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendFit {
    pub weights: BlendWeights,
    /// Bag counts per model, in matrix order; they sum to `rounds`.
    pub counts: Vec<usize>,
    pub rounds: usize,
    pub metric: Metric,
    pub score: f64,
    pub best_single: (String, f64),
}

/// Twice the average 1-based rank of each value. Always an integer, so bag
/// sums are exact and summation order cannot perturb ties.
fn doubled_ranks(values: &[f64]) -> Result<Vec<u64>> {
    let n = values.len() as f64;
    Ok(rank_transform(values)?
        .into_iter()
        .map(|r| (2.0 * r * n).round() as u64)
        .collect())
}

/// Greedy selection with replacement over rank-transformed rows. Each round
/// adds the model whose inclusion gives the best bag-average score; ties go
/// to the lowest model index. If the bag after `rounds` rounds scores worse
/// than the round-1 pick, that single model is returned with every count.
pub fn hill_climb_blend(oof: &PredictionMatrix, metric: Metric, rounds: usize) -> Result<BlendFit> {
    if rounds == 0 {
        return Err(EnsembleError::ZeroRounds);
    }
    let labels = oof.labels.as_deref().ok_or(EnsembleError::MissingLabels)?;
    let ranked: Vec<Vec<u64>> = oof.values.iter().map(|row| doubled_ranks(row)).collect::<Result<_>>()?;
    let rows = oof.rows();
    let bag_average = |sum: &[u64], size: usize, out: &mut Vec<f64>| {
        let denom = (2 * rows * size) as f64;
        out.clear();
        out.extend(sum.iter().map(|s| *s as f64 / denom));
    };

    let mut counts = vec![0usize; oof.models()];
    let mut sum = vec![0u64; rows];
    let mut trial = vec![0u64; rows];
    let mut candidate = Vec::with_capacity(rows);
    let mut first: Option<(usize, f64)> = None;
    let mut score = f64::NAN;
    for t in 0..rounds {
        let mut chosen: Option<(usize, f64)> = None;
        for (j, row) in ranked.iter().enumerate() {
            for ((c, s), r) in trial.iter_mut().zip(&sum).zip(row) {
                *c = s + r;
            }
            bag_average(&trial, t + 1, &mut candidate);
            let s = metric.evaluate(&candidate, labels)?;
            if chosen.is_none_or(|(_, b)| metric.better(s, b)) {
                chosen = Some((j, s));
            }
        }
        let (j, s) = chosen.expect("at least one model");
        first.get_or_insert((j, s));
        counts[j] += 1;
        for (acc, r) in sum.iter_mut().zip(&ranked[j]) {
            *acc += r;
        }
        score = s;
    }

    let (bj, bs) = first.expect("at least one round");
    if metric.better(bs, score) {
        log::debug!("blend regressed below the best single model; keeping `{}` alone", oof.model_ids[bj]);
        counts = vec![0; oof.models()];
        counts[bj] = rounds;
        score = bs;
    }
    let weights = BlendWeights::new(
        oof.model_ids
            .iter()
            .zip(&counts)
            .map(|(id, c)| (id.clone(), *c as f64 / rounds as f64))
            .collect(),
    )?;
    Ok(BlendFit {
        weights,
        counts,
        rounds,
        metric,
        score,
        best_single: (oof.model_ids[bj].clone(), bs),
    })
}

/// Per-row weighted average of the rank-transformed model rows.
pub fn blend(matrix: &PredictionMatrix, weights: &BlendWeights) -> Result<Vec<f64>> {
    let index: BTreeMap<&str, usize> = matrix
        .model_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut out = vec![0.0; matrix.rows()];
    for (id, w) in &weights.weights {
        let i = *index.get(id.as_str()).ok_or_else(|| EnsembleError::UnknownModel(id.clone()))?;
        if *w == 0.0 {
            continue;
        }
        for (o, r) in out.iter_mut().zip(rank_transform(&matrix.values[i])?) {
            *o += w * r;
        }
    }
    Ok(out)
}

/// Reads a two-column `(row_id, value)` file. A first line whose value does
/// not parse as a number is treated as a header.
pub fn read_scored_rows(path: &Path) -> Result<Vec<(String, f64)>> {
    let err = |message: String| EnsembleError::File {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let mut rows = Vec::new();
    let mut ids = BTreeSet::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| err(e.to_string()))?;
        if record.len() != 2 {
            return Err(err(format!("line {}: expected 2 columns, got {}", line + 1, record.len())));
        }
        let value = match record[1].parse::<f64>() {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(_) => return Err(err(format!("line {}: `{}` is not a number", line + 1, &record[1]))),
        };
        if !ids.insert(record[0].to_string()) {
            return Err(err(format!("line {}: duplicate row id `{}`", line + 1, &record[0])));
        }
        rows.push((record[0].to_string(), value));
    }
    if rows.is_empty() {
        return Err(err("no rows".into()));
    }
    Ok(rows)
}

/// Builds a fitting matrix from per-model OOF files and a labels file. Every
/// file must carry exactly the labels' row ids; rows are aligned to the
/// labels file order.
pub fn load_oof(models: &[(String, PathBuf)], labels_path: &Path) -> Result<PredictionMatrix> {
    let labels = read_scored_rows(labels_path)?;
    let mut ids = Vec::with_capacity(models.len());
    let mut values = Vec::with_capacity(models.len());
    for (id, path) in models {
        let rows: BTreeMap<String, f64> = read_scored_rows(path)?.into_iter().collect();
        if rows.len() != labels.len() || labels.iter().any(|(r, _)| !rows.contains_key(r)) {
            return Err(EnsembleError::File {
                path: path.clone(),
                message: format!("row ids do not match the labels file {}", labels_path.display()),
            });
        }
        ids.push(id.clone());
        values.push(labels.iter().map(|(r, _)| rows[r]).collect());
    }
    PredictionMatrix::new(ids, values, Some(labels.into_iter().map(|(_, y)| y).collect()))
}
