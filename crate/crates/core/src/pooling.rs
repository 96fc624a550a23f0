//! Query × train score matrices and the mean, max and KNN pooling rules that
//! turn a row of pair scores into a label.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PoolingError {
    #[error("score matrix shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite score at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("a row must contain at least one score")]
    EmptyRow,
    #[error("row has {scores} scores but {labels} labels")]
    RowLength { scores: usize, labels: usize },
    #[error("k = {k} is out of range for {columns} columns")]
    KOutOfRange { k: usize, columns: usize },
    #[error("label {0:?} has no columns")]
    EmptyLabel(String),
    #[error("malformed score CSV: {0}")]
    Csv(String),
}

/// Relevance of every (query, train sample) pair. Rows follow the query
/// order and columns the training order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Vec<f64>,
    query_ids: Vec<String>,
    train_ids: Vec<String>,
    train_labels: Vec<String>,
}

impl ScoreMatrix {
    pub fn new(
        scores: Vec<f64>,
        query_ids: Vec<String>,
        train_ids: Vec<String>,
        train_labels: Vec<String>,
    ) -> Result<Self, PoolingError> {
        if train_ids.len() != train_labels.len() {
            return Err(PoolingError::Shape(format!(
                "{} train ids but {} train labels",
                train_ids.len(),
                train_labels.len()
            )));
        }
        if scores.len() != query_ids.len() * train_ids.len() {
            return Err(PoolingError::Shape(format!(
                "{} scores for a {}×{} matrix",
                scores.len(),
                query_ids.len(),
                train_ids.len()
            )));
        }
        if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
            return Err(PoolingError::NonFinite {
                row: pos / train_ids.len(),
                col: pos % train_ids.len(),
            });
        }
        Ok(ScoreMatrix {
            scores,
            query_ids,
            train_ids,
            train_labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.query_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.train_ids.len()
    }

    pub fn row(&self, q: usize) -> &[f64] {
        let n = self.cols();
        &self.scores[q * n..(q + 1) * n]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn query_ids(&self) -> &[String] {
        &self.query_ids
    }

    pub fn train_ids(&self) -> &[String] {
        &self.train_ids
    }

    pub fn train_labels(&self) -> &[String] {
        &self.train_labels
    }

    /// Distinct train labels in first-occurrence order.
    pub fn labels(&self) -> Vec<String> {
        label_order(&self.train_labels)
    }

    /// The matrix restricted to `columns`, kept in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> ScoreMatrix {
        let mut scores = Vec::with_capacity(self.rows() * columns.len());
        for q in 0..self.rows() {
            let row = self.row(q);
            scores.extend(columns.iter().map(|&c| row[c]));
        }
        ScoreMatrix {
            scores,
            query_ids: self.query_ids.clone(),
            train_ids: columns.iter().map(|&c| self.train_ids[c].clone()).collect(),
            train_labels: columns.iter().map(|&c| self.train_labels[c].clone()).collect(),
        }
    }

    /// CSV with header `query_id,<train ids...>` and one row per query.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once("query_id").chain(self.train_ids.iter().map(String::as_str));
        w.write_record(header).expect("in-memory write");
        for q in 0..self.rows() {
            let mut record = vec![self.query_ids[q].clone()];
            record.extend(self.row(q).iter().map(|s| s.to_string()));
            w.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Parses [`ScoreMatrix::to_csv`] output; labels come from the caller
    /// keyed by train id.
    pub fn from_csv(content: &str, label_of: &HashMap<String, String>) -> Result<Self, PoolingError> {
        let err = |e: csv::Error| PoolingError::Csv(e.to_string());
        let mut r = csv::Reader::from_reader(content.as_bytes());
        let header = r.headers().map_err(err)?.clone();
        if header.get(0) != Some("query_id") {
            return Err(PoolingError::Csv("first column must be query_id".into()));
        }
        let train_ids: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let train_labels = train_ids
            .iter()
            .map(|id| {
                label_of
                    .get(id)
                    .cloned()
                    .ok_or_else(|| PoolingError::Csv(format!("no label for train id {id:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut query_ids = Vec::new();
        let mut scores = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(err)?;
            query_ids.push(rec.get(0).unwrap_or_default().to_string());
            for field in rec.iter().skip(1) {
                scores.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| PoolingError::Csv(format!("bad score {field:?}: {e}")))?,
                );
            }
        }
        ScoreMatrix::new(scores, query_ids, train_ids, train_labels)
    }
}

fn label_order(labels: &[String]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for l in labels {
        if !seen.contains(l) {
            seen.push(l.clone());
        }
    }
    seen
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolingMethod {
    #[default]
    Mean,
    Max,
    /// `None` uses [`default_k`] of the column count.
    Knn { k: Option<usize> },
}

impl PoolingMethod {
    pub fn knn() -> Self {
        PoolingMethod::Knn { k: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolingMethod::Mean => "mean",
            PoolingMethod::Max => "max",
            PoolingMethod::Knn { .. } => "knn",
        }
    }
}

impl fmt::Display for PoolingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolingMethod::Knn { k: Some(k) } => write!(f, "knn:{k}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for PoolingMethod {
    type Err = String;

    /// Accepts `mean`, `max`, `knn` and `knn:<k>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(PoolingMethod::Mean),
            "max" => Ok(PoolingMethod::Max),
            "knn" => Ok(PoolingMethod::knn()),
            other => match other.strip_prefix("knn:").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => Ok(PoolingMethod::Knn { k: Some(k) }),
                _ => Err(format!(
                    "unknown pooling method {other:?} (expected mean|max|knn|knn:<k>)"
                )),
            },
        }
    }
}

impl Serialize for PoolingMethod {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PoolingMethod {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// `max(1, floor(train_size / 2))`.
pub fn default_k(train_size: usize) -> usize {
    (train_size / 2).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScores {
    Scores(IndexMap<String, f64>),
    Votes(IndexMap<String, usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub label: String,
    pub per_label: LabelScores,
    pub tie_broken: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub query_id: String,
    pub label: String,
    pub per_label: LabelScores,
    pub tie_broken: bool,
}

fn check_row(row: &[f64], labels: &[String]) -> Result<(), PoolingError> {
    if row.is_empty() {
        return Err(PoolingError::EmptyRow);
    }
    if row.len() != labels.len() {
        return Err(PoolingError::RowLength {
            scores: row.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

fn grouped(row: &[f64], labels: &[String]) -> IndexMap<String, Vec<f64>> {
    let mut groups: IndexMap<String, Vec<f64>> = IndexMap::new();
    for (s, l) in row.iter().zip(labels) {
        groups.entry(l.clone()).or_default().push(*s);
    }
    groups
}

/// Arithmetic mean of each label's columns.
pub fn pool_mean(row: &[f64], labels: &[String]) -> Result<IndexMap<String, f64>, PoolingError> {
    check_row(row, labels)?;
    Ok(grouped(row, labels)
        .into_iter()
        .map(|(l, v)| {
            let n = v.len() as f64;
            (l, v.into_iter().sum::<f64>() / n)
        })
        .collect())
}

/// Maximum over each label's columns.
pub fn pool_max(row: &[f64], labels: &[String]) -> Result<IndexMap<String, f64>, PoolingError> {
    check_row(row, labels)?;
    Ok(grouped(row, labels)
        .into_iter()
        .map(|(l, v)| (l, v.into_iter().fold(f64::NEG_INFINITY, f64::max)))
        .collect())
}

/// Columns ordered by descending score, lower index first on ties.
fn ranked_columns(row: &[f64]) -> Vec<usize> {
    let mut cols: Vec<usize> = (0..row.len()).collect();
    cols.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    cols
}

/// Votes of the `k` highest-scoring columns; labels without votes appear
/// with zero.
pub fn pool_knn(row: &[f64], labels: &[String], k: usize) -> Result<IndexMap<String, usize>, PoolingError> {
    check_row(row, labels)?;
    if k == 0 || k > row.len() {
        return Err(PoolingError::KOutOfRange { k, columns: row.len() });
    }
    let mut votes: IndexMap<String, usize> = label_order(labels).into_iter().map(|l| (l, 0)).collect();
    for c in ranked_columns(row).into_iter().take(k) {
        votes[&labels[c]] += 1;
    }
    Ok(votes)
}

fn argmax_first(scores: &IndexMap<String, f64>) -> (String, bool) {
    let best = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut winners = scores.iter().filter(|(_, &v)| v == best).map(|(l, _)| l);
    let label = winners.next().expect("non-empty map").clone();
    (label, winners.next().is_some())
}

/// Pools one row and picks its label.
///
/// Mean and max break label ties by first occurrence. KNN breaks vote ties
/// with the label of the highest-scoring column among the tied labels.
pub fn classify(row: &[f64], labels: &[String], method: PoolingMethod) -> Result<Decision, PoolingError> {
    match method {
        PoolingMethod::Mean | PoolingMethod::Max => {
            let scores = if method == PoolingMethod::Mean {
                pool_mean(row, labels)?
            } else {
                pool_max(row, labels)?
            };
            let (label, tie_broken) = argmax_first(&scores);
            Ok(Decision {
                label,
                per_label: LabelScores::Scores(scores),
                tie_broken,
            })
        }
        PoolingMethod::Knn { k } => {
            let k = k.unwrap_or_else(|| default_k(row.len()));
            let votes = pool_knn(row, labels, k)?;
            let best = votes.values().copied().max().expect("non-empty");
            let tied: Vec<String> = votes.iter().filter(|(_, &v)| v == best).map(|(l, _)| l.clone()).collect();
            let label = if tied.len() == 1 {
                tied[0].clone()
            } else {
                ranked_columns(row)
                    .into_iter()
                    .map(|c| &labels[c])
                    .find(|l| tied.contains(*l))
                    .expect("tied labels own columns")
                    .clone()
            };
            Ok(Decision {
                label,
                per_label: LabelScores::Votes(votes),
                tie_broken: tied.len() > 1,
            })
        }
    }
}

pub fn classify_matrix(matrix: &ScoreMatrix, method: PoolingMethod) -> Result<Vec<Prediction>, PoolingError> {
    (0..matrix.rows())
        .map(|q| {
            let d = classify(matrix.row(q), matrix.train_labels(), method)?;
            Ok(Prediction {
                query_id: matrix.query_ids()[q].clone(),
                label: d.label,
                per_label: d.per_label,
                tie_broken: d.tie_broken,
            })
        })
        .collect()
}

/// CSV with columns `query_id,predicted_label,gold_label,method,tie_broken`.
pub fn predictions_csv(
    predictions: &[Prediction],
    gold: &HashMap<String, String>,
    method: PoolingMethod,
) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["query_id", "predicted_label", "gold_label", "method", "tie_broken"])
        .expect("in-memory write");
    let method = method.to_string();
    for p in predictions {
        let gold = gold.get(&p.query_id).map(String::as_str).unwrap_or("");
        let tie = if p.tie_broken { "true" } else { "false" };
        w.write_record([p.query_id.as_str(), &p.label, gold, &method, tie])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}
