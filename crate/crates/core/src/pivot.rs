//! Representative training samples per label and pivot-restricted inference.
//!
//! A sample's representativeness is its mean score from same-label training
//! samples minus its mean score from the other labels' samples. Inference
//! then scores each query against the top `p` samples of every label only.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Episode, Sample};
use crate::pooling::{classify_matrix, PoolingError, PoolingMethod, Prediction, ScoreMatrix};
use crate::scorer::{score_samples, RelevanceScorer, ScorerError};

pub const DEFAULT_PIVOTS: usize = 2;

#[derive(Debug, Error)]
pub enum PivotError {
    #[error("train relevance matrix must be square over the training set: {0}")]
    NotSquare(String),
    #[error("column {index} is out of range for {len} training samples")]
    Index { index: usize, len: usize },
    #[error("label {0:?} has no samples from other labels to compare against")]
    SingleClass(String),
    #[error("pivot count must be at least 1")]
    ZeroPivots,
    #[error("pivot {id:?} is not a training sample of label {label:?}")]
    UnknownPivot { label: String, id: String },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error("pivot file: {0}")]
    Io(#[from] std::io::Error),
    #[error("pivot file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Scores among training samples; entry `(j, i)` puts sample `j` in the
/// query slot and sample `i` in the reference slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRelevanceMatrix {
    matrix: ScoreMatrix,
}

impl TrainRelevanceMatrix {
    pub fn new(matrix: ScoreMatrix) -> Result<Self, PivotError> {
        if matrix.query_ids() != matrix.train_ids() {
            return Err(PivotError::NotSquare(format!(
                "{} rows, {} columns",
                matrix.rows(),
                matrix.cols()
            )));
        }
        Ok(TrainRelevanceMatrix { matrix })
    }

    pub fn from_scorer<S: RelevanceScorer + ?Sized>(scorer: &S, train: &[Sample]) -> Result<Self, PivotError> {
        Self::new(score_samples(scorer, train, train)?)
    }

    pub fn len(&self) -> usize {
        self.matrix.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, j: usize, i: usize) -> f64 {
        self.matrix.row(j)[i]
    }

    pub fn matrix(&self) -> &ScoreMatrix {
        &self.matrix
    }

    pub fn ids(&self) -> &[String] {
        self.matrix.train_ids()
    }

    pub fn labels(&self) -> &[String] {
        self.matrix.train_labels()
    }

    /// Applies `f` to every entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let m = &self.matrix;
        TrainRelevanceMatrix {
            matrix: ScoreMatrix::new(
                m.scores().iter().map(|&s| f(s)).collect(),
                m.query_ids().to_vec(),
                m.train_ids().to_vec(),
                m.train_labels().to_vec(),
            )
            .expect("same shape"),
        }
    }
}

/// Representativeness of training sample `i`.
///
/// With `exclude_self` the diagonal entry leaves the same-label mean, unless
/// `i` is the only sample of its label.
pub fn representativeness(m: &TrainRelevanceMatrix, i: usize, exclude_self: bool) -> Result<f64, PivotError> {
    let n = m.len();
    if i >= n {
        return Err(PivotError::Index { index: i, len: n });
    }
    let labels = m.labels();
    let own = &labels[i];
    let same: Vec<usize> = (0..n).filter(|&j| labels[j] == *own).collect();
    let same: Vec<usize> = if exclude_self && same.len() > 1 {
        same.into_iter().filter(|&j| j != i).collect()
    } else {
        same
    };
    let other: Vec<usize> = (0..n).filter(|&j| labels[j] != *own).collect();
    if other.is_empty() {
        return Err(PivotError::SingleClass(own.clone()));
    }
    let mean = |rows: &[usize]| rows.iter().map(|&j| m.entry(j, i)).sum::<f64>() / rows.len() as f64;
    Ok(mean(&same) - mean(&other))
}

/// Top-`p` training ids per label by descending representativeness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotSet {
    pub p: usize,
    /// Seed of the episode the pivots were drawn from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub pivots: IndexMap<String, Vec<String>>,
}

impl PivotSet {
    pub fn total(&self) -> usize {
        self.pivots.values().map(Vec::len).sum()
    }

    /// Column indices of `train` that are pivots, in training order.
    pub fn columns(&self, train: &[Sample]) -> Result<Vec<usize>, PivotError> {
        for (label, ids) in &self.pivots {
            for id in ids {
                if !train.iter().any(|s| s.id == *id && s.label == *label) {
                    return Err(PivotError::UnknownPivot {
                        label: label.clone(),
                        id: id.clone(),
                    });
                }
            }
        }
        Ok((0..train.len())
            .filter(|&c| {
                self.pivots
                    .get(&train[c].label)
                    .is_some_and(|ids| ids.contains(&train[c].id))
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pivot set serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PivotError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PivotError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Per-label representativeness ranking truncated to `p`; ties keep the
/// lower column index first.
pub fn select_pivots(m: &TrainRelevanceMatrix, p: usize, exclude_self: bool) -> Result<PivotSet, PivotError> {
    if p == 0 {
        return Err(PivotError::ZeroPivots);
    }
    let r = (0..m.len())
        .map(|i| representativeness(m, i, exclude_self))
        .collect::<Result<Vec<_>, _>>()?;
    let mut pivots: IndexMap<String, Vec<String>> = IndexMap::new();
    for label in m.matrix().labels() {
        let mut cols: Vec<usize> = (0..m.len()).filter(|&c| m.labels()[c] == label).collect();
        cols.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
        cols.truncate(p);
        pivots.insert(label, cols.into_iter().map(|c| m.ids()[c].clone()).collect());
    }
    Ok(PivotSet { p, seed: None, pivots })
}

#[derive(Debug, Clone)]
pub struct PivotInference {
    pub matrix: ScoreMatrix,
    pub predictions: Vec<Prediction>,
    pub pairs_per_query: usize,
}

/// Scores queries against the pivot columns only and classifies them.
pub fn pivot_infer<S: RelevanceScorer + ?Sized>(
    scorer: &S,
    episode: &Episode,
    pivots: &PivotSet,
    method: PoolingMethod,
) -> Result<PivotInference, PivotError> {
    let columns = pivots.columns(&episode.train)?;
    let restricted: Vec<Sample> = columns.iter().map(|&c| episode.train[c].clone()).collect();
    let matrix = score_samples(scorer, &episode.query, &restricted)?;
    let predictions = classify_matrix(&matrix, method)?;
    Ok(PivotInference {
        pairs_per_query: restricted.len(),
        matrix,
        predictions,
    })
}

/// Pivot inference from an already computed full score matrix.
pub fn restrict_to_pivots(
    full: &ScoreMatrix,
    train: &[Sample],
    pivots: &PivotSet,
) -> Result<ScoreMatrix, PivotError> {
    if full.train_ids().len() != train.len() || full.train_ids().iter().zip(train).any(|(a, b)| *a != b.id) {
        return Err(PivotError::NotSquare("matrix columns do not follow the training set".into()));
    }
    Ok(full.select_columns(&pivots.columns(train)?))
}
