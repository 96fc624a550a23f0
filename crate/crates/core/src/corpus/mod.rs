//! Datasets, seeded few-shot episodes, label noise and out-of-domain mixing.

mod tokenizer;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tokenizer::{
    normalize, Tokenizer, TokenizerError, DEFAULT_MAX_TOKENS, MASK, NEGATIVE_WORDS, PAD,
    POSITIVE_WORDS, SEP, UNK,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record on line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("dataset {0:?} contains no records")]
    Empty(String),
    #[error("duplicate sample id {id:?} on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("dataset {name:?} has {found} distinct label(s); at least 2 are required")]
    TooFewLabels { name: String, found: usize },
    #[error("sample {id:?} has label {label:?}, which is not in the label set")]
    UnknownLabel { id: String, label: String },
    #[error("label {label:?} has {available} sample(s) but {needed} were requested")]
    InsufficientSamples {
        label: String,
        needed: usize,
        available: usize,
    },
    #[error("only {available} sample(s) remain for the query set but {needed} were requested")]
    InsufficientQueries { needed: usize, available: usize },
    #[error("cannot corrupt {requested} labels in a training set of {available}")]
    TooMuchNoise { requested: usize, available: usize },
    #[error("out-of-domain source {0:?} is the episode's own dataset")]
    SameDataset(String),
    #[error("episode refers to sample {id:?}, which is not in dataset {dataset:?}")]
    UnknownSample { dataset: String, id: String },
    #[error("episode record belongs to dataset {expected:?}, got {found:?}")]
    DatasetMismatch { expected: String, found: String },
}

/// One labeled text unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub label: String,
    pub dataset_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    name: String,
    samples: Vec<Sample>,
    label_set: Vec<String>,
}

impl Dataset {
    /// Validates ids and labels; the label set is the first-occurrence order
    /// of the sample labels.
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self, CorpusError> {
        let name = name.into();
        if samples.is_empty() {
            return Err(CorpusError::Empty(name));
        }
        let mut seen = HashSet::new();
        let mut label_set: Vec<String> = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    id: s.id.clone(),
                    line: i + 1,
                });
            }
            if s.label.is_empty() {
                return Err(CorpusError::Malformed {
                    line: i + 1,
                    reason: "empty label".into(),
                });
            }
            if !label_set.contains(&s.label) {
                label_set.push(s.label.clone());
            }
        }
        if label_set.len() < 2 {
            return Err(CorpusError::TooFewLabels {
                name,
                found: label_set.len(),
            });
        }
        let samples = samples
            .into_iter()
            .map(|mut s| {
                s.dataset_tag = name.clone();
                s
            })
            .collect();
        Ok(Dataset {
            name,
            samples,
            label_set,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    fn id_index(&self) -> HashMap<&str, &Sample> {
        self.samples.iter().map(|s| (s.id.as_str(), s)).collect()
    }

    /// Sample positions grouped by label, in label-set order.
    fn positions_by_label(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.label_set.len()];
        for (pos, s) in self.samples.iter().enumerate() {
            let l = self.label_set.iter().position(|l| *l == s.label).unwrap();
            groups[l].push(pos);
        }
        groups
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<serde_json::Value>,
    text: Option<serde_json::Value>,
    label: Option<serde_json::Value>,
}

/// Reads a JSONL dataset. The dataset name defaults to the file stem.
pub fn load_dataset(path: impl AsRef<Path>, name: Option<&str>) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = match name {
        Some(n) => n.to_string(),
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
    };
    parse_jsonl(&name, &content)
}

/// Parses JSONL content: one object per line with string fields `text` and
/// `label` and an optional `id` (the zero-based line index when absent).
/// Blank lines are skipped.
pub fn parse_jsonl(name: &str, content: &str) -> Result<Dataset, CorpusError> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| CorpusError::Malformed {
            line: line_no,
            reason,
        };
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
        let text = match raw.text {
            Some(serde_json::Value::String(t)) => t,
            Some(_) => return Err(malformed("field \"text\" is not a string".into())),
            None => return Err(malformed("missing field \"text\"".into())),
        };
        let label = match raw.label {
            Some(serde_json::Value::String(l)) if !l.is_empty() => l,
            Some(serde_json::Value::String(_)) => return Err(malformed("empty label".into())),
            Some(_) => return Err(malformed("field \"label\" is not a string".into())),
            None => return Err(malformed("missing field \"label\"".into())),
        };
        let id = match raw.id {
            None | Some(serde_json::Value::Null) => idx.to_string(),
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(_) => return Err(malformed("field \"id\" must be a string or number".into())),
        };
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { id, line: line_no });
        }
        samples.push(Sample {
            id,
            text,
            label,
            dataset_tag: name.to_string(),
        });
    }
    Dataset::new(name, samples)
}

/// A corrupted training label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFlip {
    pub original: String,
    pub replaced: String,
}

/// A seeded few-shot split of one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub dataset: String,
    /// Label set of the source dataset.
    pub labels: Vec<String>,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub shots: usize,
    pub seed: u64,
    pub noisy: BTreeMap<String, LabelFlip>,
    pub ood_dataset: Option<String>,
    pub ood_train: Vec<Sample>,
}

impl Episode {
    pub fn noisy_ids(&self) -> BTreeSet<&str> {
        self.noisy.keys().map(String::as_str).collect()
    }

    /// Per-label training-sample counts in label-set order.
    pub fn train_label_counts(&self) -> Vec<(String, usize)> {
        self.labels
            .iter()
            .map(|l| (l.clone(), self.train.iter().filter(|s| s.label == *l).count()))
            .collect()
    }

    pub fn to_record(&self) -> EpisodeRecord {
        EpisodeRecord {
            dataset: self.dataset.clone(),
            seed: self.seed,
            shots: self.shots,
            labels: self.labels.clone(),
            train: self
                .train
                .iter()
                .map(|s| TrainEntry {
                    id: s.id.clone(),
                    label: s.label.clone(),
                })
                .collect(),
            query_ids: self.query.iter().map(|s| s.id.clone()).collect(),
            corrupted: self.noisy.clone(),
            ood_dataset: self.ood_dataset.clone(),
            ood_ids: self.ood_train.iter().map(|s| s.id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainEntry {
    pub id: String,
    pub label: String,
}

/// Serialized episode: enough to rebuild it from its datasets without
/// re-sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub dataset: String,
    pub seed: u64,
    pub shots: usize,
    pub labels: Vec<String>,
    /// Training ids with their (possibly corrupted) labels.
    pub train: Vec<TrainEntry>,
    pub query_ids: Vec<String>,
    pub corrupted: BTreeMap<String, LabelFlip>,
    pub ood_dataset: Option<String>,
    pub ood_ids: Vec<String>,
}

impl EpisodeRecord {
    pub fn resolve(&self, dataset: &Dataset, ood: Option<&Dataset>) -> Result<Episode, CorpusError> {
        if dataset.name() != self.dataset {
            return Err(CorpusError::DatasetMismatch {
                expected: self.dataset.clone(),
                found: dataset.name().to_string(),
            });
        }
        let lookup = |ds: &Dataset, ids: &mut dyn Iterator<Item = &String>| {
            let by_id = ds.id_index();
            ids.map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| CorpusError::UnknownSample {
                        dataset: ds.name().to_string(),
                        id: id.clone(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()
        };
        let mut train = lookup(dataset, &mut self.train.iter().map(|e| &e.id))?;
        for (s, e) in train.iter_mut().zip(&self.train) {
            s.label = e.label.clone();
        }
        let query = lookup(dataset, &mut self.query_ids.iter())?;
        let ood_train = match (&self.ood_dataset, ood) {
            (Some(name), Some(ds)) if ds.name() == name => lookup(ds, &mut self.ood_ids.iter())?,
            (Some(name), found) => {
                return Err(CorpusError::DatasetMismatch {
                    expected: name.clone(),
                    found: found.map(|d| d.name().to_string()).unwrap_or_default(),
                })
            }
            (None, _) => Vec::new(),
        };
        Ok(Episode {
            dataset: self.dataset.clone(),
            labels: self.labels.clone(),
            train,
            query,
            shots: self.shots,
            seed: self.seed,
            noisy: self.corrupted.clone(),
            ood_dataset: self.ood_dataset.clone(),
            ood_train,
        })
    }
}

/// Draws `shots` samples per label from each group, without replacement.
fn draw_per_label(
    dataset: &Dataset,
    shots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, CorpusError> {
    let mut picked = Vec::with_capacity(shots * dataset.label_set.len());
    for (label, group) in dataset.label_set.iter().zip(dataset.positions_by_label()) {
        if group.len() < shots {
            return Err(CorpusError::InsufficientSamples {
                label: label.clone(),
                needed: shots,
                available: group.len(),
            });
        }
        let mut chosen: Vec<usize> = index::sample(rng, group.len(), shots)
            .into_iter()
            .map(|i| group[i])
            .collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    Ok(picked)
}

/// Samples a balanced training set and a disjoint query set.
///
/// The training list is label-major (label-set order), then dataset order
/// within a label. Queries keep dataset order.
pub fn sample_episode(
    dataset: &Dataset,
    shots: usize,
    query_size: usize,
    seed: u64,
) -> Result<Episode, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_pos = draw_per_label(dataset, shots, &mut rng)?;
    let taken: HashSet<usize> = train_pos.iter().copied().collect();
    let rest: Vec<usize> = (0..dataset.len()).filter(|p| !taken.contains(p)).collect();
    if rest.len() < query_size {
        return Err(CorpusError::InsufficientQueries {
            needed: query_size,
            available: rest.len(),
        });
    }
    let mut query_pos: Vec<usize> = index::sample(&mut rng, rest.len(), query_size)
        .into_iter()
        .map(|i| rest[i])
        .collect();
    query_pos.sort_unstable();
    Ok(Episode {
        dataset: dataset.name.clone(),
        labels: dataset.label_set.clone(),
        train: train_pos.iter().map(|&p| dataset.samples[p].clone()).collect(),
        query: query_pos.iter().map(|&p| dataset.samples[p].clone()).collect(),
        shots,
        seed,
        noisy: BTreeMap::new(),
        ood_dataset: None,
        ood_train: Vec::new(),
    })
}

/// Replaces the labels of `m` distinct training samples, each with a label
/// drawn uniformly from the other labels of the dataset.
pub fn inject_label_noise(episode: &Episode, m: usize, seed: u64) -> Result<Episode, CorpusError> {
    if m > episode.train.len() {
        return Err(CorpusError::TooMuchNoise {
            requested: m,
            available: episode.train.len(),
        });
    }
    let mut out = episode.clone();
    if m == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut victims = index::sample(&mut rng, out.train.len(), m).into_vec();
    victims.sort_unstable();
    for v in victims {
        let sample = &mut out.train[v];
        let others: Vec<&String> = out.labels.iter().filter(|l| **l != sample.label).collect();
        let replaced = others[rng.random_range(0..others.len())].clone();
        let original = out
            .noisy
            .get(&sample.id)
            .map(|f| f.original.clone())
            .unwrap_or_else(|| sample.label.clone());
        sample.label = replaced.clone();
        if replaced == original {
            out.noisy.remove(&sample.id);
        } else {
            out.noisy
                .insert(sample.id.clone(), LabelFlip { original, replaced });
        }
    }
    Ok(out)
}

/// Adds an `ood_shots`-per-label draw from another dataset to the training
/// pool. Train and query sets are untouched.
pub fn mix_ood(
    episode: &Episode,
    ood_source: &Dataset,
    ood_shots: usize,
    seed: u64,
) -> Result<Episode, CorpusError> {
    if ood_source.name == episode.dataset {
        return Err(CorpusError::SameDataset(ood_source.name.clone()));
    }
    let mut out = episode.clone();
    if ood_shots == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = draw_per_label(ood_source, ood_shots, &mut rng)?;
    out.ood_dataset = Some(ood_source.name.clone());
    out.ood_train = picked.iter().map(|&p| ood_source.samples[p].clone()).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    pub(crate) fn toy_dataset(name: &str, labels: usize, per_label: usize) -> Dataset {
        let samples = (0..labels * per_label)
            .map(|i| Sample {
                id: format!("{name}-{i}"),
                text: format!("text {i} of class {}", i % labels),
                label: format!("c{}", i % labels),
                dataset_tag: name.into(),
            })
            .collect();
        Dataset::new(name, samples).unwrap()
    }

    #[test]
    fn loads_valid_jsonl() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text": "a", "label": "x"}}"#).unwrap();
        writeln!(f, r#"{{"id": "q", "text": "b", "label": "y"}}"#).unwrap();
        writeln!(f).unwrap();
        writeln!(f, r#"{{"id": 7, "text": "c", "label": "x"}}"#).unwrap();
        let ds = load_dataset(f.path(), Some("demo")).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.label_set(), ["x", "y"]);
        let ids: Vec<&str> = ds.samples().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["0", "q", "7"]);
        assert!(ds.samples().iter().all(|s| s.dataset_tag == "demo"));
    }

    #[test]
    fn missing_label_names_line() {
        let content = "{\"text\": \"a\", \"label\": \"x\"}\n{\"text\": \"b\"}\n";
        match parse_jsonl("d", content) {
            Err(CorpusError::Malformed { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("label"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_duplicates_and_single_label() {
        assert!(matches!(parse_jsonl("d", "\n\n"), Err(CorpusError::Empty(_))));
        let dup = "{\"id\":\"a\",\"text\":\"t\",\"label\":\"x\"}\n{\"id\":\"a\",\"text\":\"u\",\"label\":\"y\"}";
        assert!(matches!(
            parse_jsonl("d", dup),
            Err(CorpusError::DuplicateId { line: 2, .. })
        ));
        let single = "{\"text\":\"t\",\"label\":\"x\"}\n{\"text\":\"u\",\"label\":\"x\"}";
        assert!(matches!(
            parse_jsonl("d", single),
            Err(CorpusError::TooFewLabels { found: 1, .. })
        ));
    }

    #[test]
    fn four_label_corpus() {
        let ds = toy_dataset("agnews", 4, 10);
        assert_eq!(ds.label_set().len(), 4);
    }

    #[test]
    fn episode_sizes_and_determinism() {
        let ds = toy_dataset("d", 4, 10);
        let ep = sample_episode(&ds, 2, 12, 42).unwrap();
        assert_eq!(ep.train.len(), 8);
        assert_eq!(ep.query.len(), 12);
        for (_, n) in ep.train_label_counts() {
            assert_eq!(n, 2);
        }
        let again = sample_episode(&ds, 2, 12, 42).unwrap();
        assert_eq!(ep, again);
        let other = sample_episode(&ds, 2, 12, 43).unwrap();
        assert_ne!(ep.to_record(), other.to_record());
    }

    #[test]
    fn insufficient_samples() {
        let ds = toy_dataset("d", 2, 10);
        assert!(matches!(
            sample_episode(&ds, 16, 1, 0),
            Err(CorpusError::InsufficientSamples { needed: 16, available: 10, .. })
        ));
        assert!(matches!(
            sample_episode(&ds, 5, 11, 0),
            Err(CorpusError::InsufficientQueries { needed: 11, available: 10 })
        ));
    }

    #[test]
    fn noise_zero_is_identity() {
        let ds = toy_dataset("d", 4, 10);
        let ep = sample_episode(&ds, 2, 4, 1).unwrap();
        let noisy = inject_label_noise(&ep, 0, 9).unwrap();
        assert_eq!(noisy, ep);
        assert!(noisy.noisy_ids().is_empty());
    }

    #[test]
    fn noise_one_changes_exactly_one_label() {
        let ds = toy_dataset("d", 4, 10);
        let ep = sample_episode(&ds, 2, 4, 1).unwrap();
        let noisy = inject_label_noise(&ep, 1, 9).unwrap();
        let diffs: Vec<usize> = (0..ep.train.len())
            .filter(|&i| ep.train[i] != noisy.train[i])
            .collect();
        assert_eq!(diffs.len(), 1);
        let i = diffs[0];
        assert_eq!(ep.train[i].id, noisy.train[i].id);
        assert_eq!(ep.train[i].text, noisy.train[i].text);
        assert_ne!(ep.train[i].label, noisy.train[i].label);
        assert_eq!(noisy.noisy_ids(), BTreeSet::from([ep.train[i].id.as_str()]));
        assert_eq!(noisy.query, ep.query);
    }

    #[test]
    fn noise_four_on_sixteen_shot() {
        let ds = toy_dataset("agnews", 4, 40);
        let ep = sample_episode(&ds, 16, 10, 3).unwrap();
        let noisy = inject_label_noise(&ep, 4, 5).unwrap();
        let changed = ep
            .train
            .iter()
            .zip(&noisy.train)
            .filter(|(a, b)| a.label != b.label)
            .count();
        assert_eq!(changed, 4);
        assert_eq!(noisy.noisy.len(), 4);
        assert!(matches!(
            inject_label_noise(&ep, 65, 5),
            Err(CorpusError::TooMuchNoise { .. })
        ));
    }

    #[test]
    fn ood_mixing() {
        let ds = toy_dataset("agnews", 4, 20);
        let other = toy_dataset("yahoo", 10, 20);
        let ep = sample_episode(&ds, 2, 5, 1).unwrap();
        let mixed = mix_ood(&ep, &other, 16, 2).unwrap();
        assert_eq!(mixed.ood_train.len(), 160);
        assert_eq!(mixed.train, ep.train);
        assert_eq!(mixed.query, ep.query);
        assert!(mixed.ood_train.iter().all(|s| s.dataset_tag == "yahoo"));
        assert_eq!(mix_ood(&ep, &other, 0, 2).unwrap(), ep);
        assert!(matches!(mix_ood(&ep, &ds, 2, 2), Err(CorpusError::SameDataset(_))));
        assert!(matches!(
            mix_ood(&ep, &other, 21, 2),
            Err(CorpusError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn record_round_trip_rebuilds_episode() {
        let ds = toy_dataset("a", 3, 12);
        let other = toy_dataset("b", 2, 6);
        let ep = sample_episode(&ds, 3, 6, 11).unwrap();
        let ep = inject_label_noise(&ep, 2, 12).unwrap();
        let ep = mix_ood(&ep, &other, 2, 13).unwrap();
        let json = serde_json::to_string(&ep.to_record()).unwrap();
        let record: EpisodeRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(record.resolve(&ds, Some(&other)).unwrap(), ep);
        assert!(record.resolve(&other, None).is_err());
    }

    proptest! {
        #[test]
        fn sampling_invariants(labels in 2usize..6, per_label in 4usize..12, shots in 1usize..4,
                               m in 0usize..5, seed in any::<u64>()) {
            let ds = toy_dataset("d", labels, per_label);
            let query = labels * (per_label - shots) / 2;
            let ep = sample_episode(&ds, shots, query, seed).unwrap();
            for (_, n) in ep.train_label_counts() {
                prop_assert_eq!(n, shots);
            }
            let train_ids: HashSet<&str> = ep.train.iter().map(|s| s.id.as_str()).collect();
            prop_assert!(ep.query.iter().all(|s| !train_ids.contains(s.id.as_str())));
            let m = m.min(ep.train.len());
            let noisy = inject_label_noise(&ep, m, seed ^ 1).unwrap();
            let changed = ep.train.iter().zip(&noisy.train).filter(|(a, b)| a.label != b.label).count();
            prop_assert_eq!(changed, m);
            prop_assert!(noisy.noisy_ids().iter().all(|id| train_ids.contains(id)));
            let again = inject_label_noise(&sample_episode(&ds, shots, query, seed).unwrap(), m, seed ^ 1).unwrap();
            prop_assert_eq!(
                serde_json::to_string(&noisy.to_record()).unwrap(),
                serde_json::to_string(&again.to_record()).unwrap()
            );
        }
    }
}
