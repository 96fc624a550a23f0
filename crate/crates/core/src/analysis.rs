//! Accuracy aggregation and score-distribution diagnostics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pooling::{Prediction, ScoreMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("no predictions")]
    Empty,
    #[error("query {0:?} has no gold label")]
    MissingGold(String),
    #[error("{predictions} predictions for {gold} gold labels")]
    CountMismatch { predictions: usize, gold: usize },
    #[error("predicted label {0:?} has no training count")]
    UnknownLabel(String),
    #[error("score matrix is empty")]
    EmptyMatrix,
}

/// Fraction of predictions matching the gold label of their query.
pub fn accuracy(predictions: &[Prediction], gold: &HashMap<String, String>) -> Result<f64, AnalysisError> {
    if predictions.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if predictions.len() != gold.len() {
        return Err(AnalysisError::CountMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    let mut correct = 0usize;
    for p in predictions {
        let g = gold
            .get(&p.query_id)
            .ok_or_else(|| AnalysisError::MissingGold(p.query_id.clone()))?;
        if *g == p.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / predictions.len() as f64)
}

/// `clean - noisy`, both in percentage points.
pub fn performance_drop(clean: f64, noisy: f64) -> f64 {
    clean - noisy
}

/// Rows sorted descending and averaged position-wise, then shifted so the
/// minimum is zero.
pub fn score_profile(matrix: &ScoreMatrix) -> Result<Vec<f64>, AnalysisError> {
    if matrix.rows() == 0 || matrix.cols() == 0 {
        return Err(AnalysisError::EmptyMatrix);
    }
    let mut profile = vec![0.0; matrix.cols()];
    for q in 0..matrix.rows() {
        let mut row = matrix.row(q).to_vec();
        row.sort_by(|a, b| b.total_cmp(a));
        for (p, v) in profile.iter_mut().zip(row) {
            *p += v;
        }
    }
    let n = matrix.rows() as f64;
    for p in &mut profile {
        *p /= n;
    }
    let min = profile.iter().copied().fold(f64::INFINITY, f64::min);
    for p in &mut profile {
        *p -= min;
    }
    Ok(profile)
}

/// Mean number of queries predicted into classes of each training size.
pub fn predictions_by_class_size(
    predictions: &[Prediction],
    train_label_counts: &[(String, usize)],
) -> Result<BTreeMap<usize, f64>, AnalysisError> {
    let mut predicted: HashMap<&str, usize> = train_label_counts.iter().map(|(l, _)| (l.as_str(), 0)).collect();
    for p in predictions {
        *predicted
            .get_mut(p.label.as_str())
            .ok_or_else(|| AnalysisError::UnknownLabel(p.label.clone()))? += 1;
    }
    let mut groups: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (label, size) in train_label_counts {
        let g = groups.entry(*size).or_default();
        g.0 += predicted[label.as_str()];
        g.1 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(size, (total, classes))| (size, total as f64 / classes as f64))
        .collect())
}

/// Averages per-run class-size maps; each size is averaged over the runs in
/// which it occurs.
pub fn average_class_size_maps(maps: &[BTreeMap<usize, f64>]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for m in maps {
        for (size, v) in m {
            let e = acc.entry(*size).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(s, (t, n))| (s, t / n as f64)).collect()
}

/// Population standard deviation of per-class prediction counts over
/// `label_set`; classes never predicted count as zero.
pub fn prediction_count_stddev(predictions: &[Prediction], label_set: &[String]) -> f64 {
    if label_set.is_empty() {
        return 0.0;
    }
    let counts: Vec<f64> = label_set
        .iter()
        .map(|l| predictions.iter().filter(|p| p.label == *l).count() as f64)
        .collect();
    population_stddev(&counts)
}

pub fn population_stddev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

const EPOCH_SHOTS: [usize; 4] = [2, 4, 8, 16];
const EPOCH_TABLE: [(&str, [usize; 4]); 3] = [
    ("agnews", [120, 60, 30, 15]),
    ("dbpedia", [32, 16, 8, 4]),
    ("yahoo", [36, 18, 9, 5]),
];

fn table_row(dataset: &str) -> Option<&'static [usize; 4]> {
    let key: String = dataset
        .chars()
        .filter(char::is_ascii_alphanumeric)
        .collect::<String>()
        .to_ascii_lowercase();
    let key = match key.as_str() {
        "agsnews" | "agnews" | "ag" => "agnews",
        "dbpedia" | "dbpedia14" => "dbpedia",
        "yahoo" | "yahooanswers" | "yahooanswerstopics" => "yahoo",
        _ => return None,
    };
    EPOCH_TABLE.iter().find(|(n, _)| *n == key).map(|(_, r)| r)
}

/// Epoch count and whether it came straight from the table.
pub fn epochs_lookup(dataset: &str, shots: usize) -> (usize, bool) {
    let known = table_row(dataset);
    let row = known.unwrap_or(&EPOCH_TABLE[0].1);
    if let (Some(_), Some(i)) = (known, EPOCH_SHOTS.iter().position(|&s| s == shots)) {
        return (row[i], true);
    }
    let shots = shots.max(1);
    // nearest tabulated shot count on a log scale, lower one on ties
    let (i, _) = EPOCH_SHOTS
        .iter()
        .enumerate()
        .map(|(i, &s)| (i, ((s as f64).ln() - (shots as f64).ln()).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty table");
    let epochs = (row[i] as f64 * EPOCH_SHOTS[i] as f64 / shots as f64).round() as usize;
    (epochs.max(1), false)
}

/// Training epochs for a dataset and shot count.
///
/// AG's News, DBPedia and Yahoo at 2/4/8/16 shots come from a fixed table.
/// Other shot counts scale the nearest tabulated entry by `1 / shots`;
/// unknown datasets use the AG's News row.
pub fn epochs_for(dataset: &str, shots: usize) -> usize {
    epochs_lookup(dataset, shots).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

pub fn aggregate_runs(per_seed: &[f64]) -> Result<RunSummary, AnalysisError> {
    if per_seed.is_empty() {
        return Err(AnalysisError::Empty);
    }
    Ok(RunSummary {
        per_seed: per_seed.to_vec(),
        mean: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
    })
}

/// Per-seed diagnostics carried by a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot_accuracy: Option<f64>,
    pub train_label_counts: Vec<(String, usize)>,
    pub prediction_count_stddev: f64,
    pub predictions_by_class_size: BTreeMap<usize, f64>,
    pub pairs_per_query: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot_pairs_per_query: Option<usize>,
    pub scorer_calls: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub dataset: String,
    pub shots: usize,
    pub query_size: usize,
    pub scorer: String,
    pub aggregate: String,
    pub pooling: String,
    pub noise: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot_p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    pub seeds: Vec<u64>,
    pub per_seed_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot_mean_accuracy: Option<f64>,
    pub mean_prediction_count_stddev: f64,
    /// Per-run class-size averages, then averaged over the runs containing
    /// each size.
    pub predictions_by_class_size: BTreeMap<usize, f64>,
    pub runs: Vec<SeedResult>,
}

/// Percentage points with two decimals.
pub fn pp(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}

/// Renders rows as left-aligned columns separated by two spaces.
pub fn aligned_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut head = vec![
            vec!["dataset".into(), self.dataset.clone()],
            vec!["shots".into(), self.shots.to_string()],
            vec!["scorer".into(), format!("{} ({})", self.scorer, self.aggregate)],
            vec!["pooling".into(), self.pooling.clone()],
            vec!["noise".into(), self.noise.to_string()],
        ];
        if let Some(ood) = &self.ood_source {
            head.push(vec!["ood source".into(), ood.clone()]);
        }
        if let Some(p) = self.pivot_p {
            head.push(vec!["pivots per label".into(), p.to_string()]);
        }
        if let Some(e) = self.epochs {
            head.push(vec!["epochs".into(), e.to_string()]);
        }
        head.push(vec!["config".into(), self.config_hash.clone()]);
        out.push_str(&aligned_table(&head));
        out.push('\n');

        let pivots = self.pivot_mean_accuracy.is_some();
        let mut header = vec!["seed".to_string(), "accuracy".into()];
        if pivots {
            header.push("pivot accuracy".into());
        }
        header.extend(["pairs/query".to_string(), "count stddev".into()]);
        let mut rows = vec![header];
        for r in &self.runs {
            let mut row = vec![r.seed.to_string(), pp(r.accuracy)];
            if pivots {
                row.push(r.pivot_accuracy.map(pp).unwrap_or_default());
            }
            let pairs = match r.pivot_pairs_per_query {
                Some(p) => format!("{} -> {}", r.pairs_per_query, p),
                None => r.pairs_per_query.to_string(),
            };
            row.extend([pairs, format!("{:.2}", r.prediction_count_stddev)]);
            rows.push(row);
        }
        let mut mean = vec!["mean".to_string(), pp(self.mean_accuracy)];
        if let Some(p) = self.pivot_mean_accuracy {
            mean.push(pp(p));
        }
        mean.extend([String::new(), format!("{:.2}", self.mean_prediction_count_stddev)]);
        rows.push(mean);
        out.push_str(&aligned_table(&rows));

        if !self.predictions_by_class_size.is_empty() {
            out.push('\n');
            let mut rows = vec![vec!["class size".to_string(), "mean predicted (per run, averaged)".into()]];
            for (size, v) in &self.predictions_by_class_size {
                rows.push(vec![size.to_string(), format!("{v:.2}")]);
            }
            out.push_str(&aligned_table(&rows));
        }
        out
    }
}

/// CSV `rank,score` of a score profile.
pub fn profile_csv(profile: &[f64]) -> String {
    let mut out = String::from("rank,score\n");
    for (i, v) in profile.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, v);
    }
    out
}

/// CSV `class_size,mean_predicted`.
pub fn class_size_csv(map: &BTreeMap<usize, f64>) -> String {
    let mut out = String::from("class_size,mean_predicted\n");
    for (s, v) in map {
        let _ = writeln!(out, "{s},{v}");
    }
    out
}
