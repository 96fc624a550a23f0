//! Configuration-driven pipeline: episode sampling, scorer training,
//! inference, pivots and reports, plus one-axis sweeps.
//!
//! Artifacts land in `<output_dir>/<config hash>/`, with one `seed-<n>/`
//! directory per seed.

mod config;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{derive_seed, RunConfig, ScorerKind, SeedStream};

use crate::analysis::{
    accuracy, aggregate_runs, aligned_table, average_class_size_maps, epochs_for, performance_drop, pp,
    prediction_count_stddev, predictions_by_class_size, profile_csv, score_profile, ExperimentReport,
    SeedResult,
};
use crate::corpus::{inject_label_noise, load_dataset, mix_ood, sample_episode, Dataset, Episode, EpisodeRecord, Tokenizer};
use crate::pivot::{select_pivots, PivotSet, TrainRelevanceMatrix};
use crate::pooling::{classify_matrix, predictions_csv, PoolingMethod, ScoreMatrix};
use crate::prompting::{build_training_pairs, PromptTemplate};
use crate::scorer::checkpoint::{Checkpoint, Provenance};
use crate::scorer::train::{train, TrainOutcome};
use crate::scorer::{
    score_matrix, score_samples, BinomialRelevance, CountingScorer, LexicalOverlapScorer, RelevanceScorer,
    ScorerError, ScorerParams, TinyMlmScorer,
};
use crate::synthetic;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Episode,
    Train,
    Score,
    Pivot,
    Pool,
    Analysis,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Load => "dataset loading",
            Stage::Episode => "episode sampling",
            Stage::Train => "training",
            Stage::Score => "scoring",
            Stage::Pivot => "pivot selection",
            Stage::Pool => "pooling",
            Stage::Analysis => "analysis",
            Stage::Write => "artifact writing",
        })
    }
}

#[derive(Debug)]
pub enum ExperimentError {
    Config(String),
    Pipeline {
        stage: Stage,
        seed: Option<u64>,
        message: String,
    },
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentError::Config(m) => write!(f, "configuration error: {m}"),
            ExperimentError::Pipeline {
                stage,
                seed: Some(seed),
                message,
            } => write!(f, "{stage} failed for seed {seed}: {message}"),
            ExperimentError::Pipeline { stage, message, .. } => write!(f, "{stage} failed: {message}"),
        }
    }
}

impl std::error::Error for ExperimentError {}

fn at<E: fmt::Display>(stage: Stage, seed: Option<u64>) -> impl FnOnce(E) -> ExperimentError {
    move |e| ExperimentError::Pipeline {
        stage,
        seed,
        message: e.to_string(),
    }
}

/// Loads a JSONL dataset, or a bundled corpus named `builtin:<name>`.
pub fn load_source(path: &str, name: Option<&str>) -> Result<Dataset, ExperimentError> {
    if let Some(builtin) = path.strip_prefix("builtin:") {
        let ds = match builtin {
            synthetic::FOUR_CLASS_NAME => synthetic::four_class(),
            synthetic::TWO_CLASS_NAME => synthetic::two_class(),
            other => return Err(ExperimentError::Config(format!("unknown bundled dataset {other:?}"))),
        };
        return match name {
            Some(n) if n != ds.name() => Dataset::new(n, ds.samples().to_vec()).map_err(at(Stage::Load, None)),
            _ => Ok(ds),
        };
    }
    load_dataset(path, name).map_err(at(Stage::Load, None))
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub main: Dataset,
    pub ood: Option<Dataset>,
}

pub fn load_datasets(config: &RunConfig) -> Result<Datasets, ExperimentError> {
    let main = load_source(&config.dataset_path, config.dataset_name.as_deref())?;
    let ood = match &config.ood_dataset_path {
        Some(p) => Some(load_source(p, config.ood_dataset_name.as_deref())?),
        None => None,
    };
    check_against(config, &main)?;
    Ok(Datasets { main, ood })
}

/// The seeded episode of one run, with label noise and OOD mixing applied.
pub fn sample_seed_episode(config: &RunConfig, data: &Datasets, seed: u64) -> Result<Episode, ExperimentError> {
    let err = at(Stage::Episode, Some(seed));
    let inner = || -> Result<Episode, crate::corpus::CorpusError> {
        let mut ep = sample_episode(
            &data.main,
            config.shots,
            config.query_size,
            derive_seed(seed, SeedStream::Episode),
        )?;
        // the run seed identifies the episode in artifacts
        ep.seed = seed;
        if config.noise > 0 {
            ep = inject_label_noise(&ep, config.noise, derive_seed(seed, SeedStream::Noise))?;
        }
        if let Some(ood) = &data.ood {
            ep = mix_ood(&ep, ood, config.ood_shots, derive_seed(seed, SeedStream::Ood))?;
        }
        Ok(ep)
    };
    inner().map_err(err)
}

/// Vocabulary over every text of the episode plus the template words.
pub fn episode_tokenizer(episode: &Episode, template: &PromptTemplate) -> Tokenizer {
    Tokenizer::build(
        episode
            .train
            .iter()
            .chain(&episode.ood_train)
            .chain(&episode.query)
            .map(|s| s.text.as_str()),
        template.literal_words(),
    )
}

pub fn epochs_for_config(config: &RunConfig, dataset: &str) -> usize {
    config.epochs.unwrap_or_else(|| epochs_for(dataset, config.shots))
}

/// Initializes and trains a tiny scorer on the episode's training pairs.
pub fn train_scorer(
    config: &RunConfig,
    episode: &Episode,
    seed: u64,
) -> Result<(TinyMlmScorer, TrainOutcome), ExperimentError> {
    let err = |e: ScorerError| at(Stage::Train, Some(seed))(e);
    let template = config.prompt_template()?;
    let tokenizer = episode_tokenizer(episode, &template);
    let arch = config.architecture(tokenizer.len(), template.max_sequence_len());
    let params = ScorerParams::init(arch, derive_seed(seed, SeedStream::Init)).map_err(err)?;
    let mut scorer = TinyMlmScorer::new(params, tokenizer, template, config.aggregate).map_err(err)?;
    let pairs = build_training_pairs(episode, scorer.template(), scorer.tokenizer());
    let epochs = epochs_for_config(config, &episode.dataset);
    let training = config.training(epochs, derive_seed(seed, SeedStream::Shuffle));
    let outcome = train(scorer.params().clone(), &pairs, &training, scorer.objective()).map_err(err)?;
    scorer.set_params(outcome.params.clone());
    Ok((scorer, outcome))
}

#[derive(Debug, Clone)]
pub enum ActiveScorer {
    Lexical(LexicalOverlapScorer),
    TinyMlm(Box<TinyMlmScorer>),
}

impl RelevanceScorer for ActiveScorer {
    fn relevance(&self, query: &str, reference: &str) -> Result<BinomialRelevance, ScorerError> {
        match self {
            ActiveScorer::Lexical(s) => s.relevance(query, reference),
            ActiveScorer::TinyMlm(s) => s.relevance(query, reference),
        }
    }
}

/// A seed's episode and ready-to-use scorer.
pub struct PreparedSeed {
    pub seed: u64,
    pub episode: Episode,
    pub scorer: ActiveScorer,
    pub loss_trace: Vec<f64>,
    pub epochs: Option<usize>,
}

pub fn prepare_seed(config: &RunConfig, data: &Datasets, seed: u64) -> Result<PreparedSeed, ExperimentError> {
    let episode = sample_seed_episode(config, data, seed)?;
    let (scorer, loss_trace, epochs) = match config.scorer {
        ScorerKind::Lexical => (ActiveScorer::Lexical(LexicalOverlapScorer), Vec::new(), None),
        ScorerKind::TinyMlm => {
            let (s, out) = train_scorer(config, &episode, seed)?;
            let epochs = out.loss_trace.len();
            (ActiveScorer::TinyMlm(Box::new(s)), out.loss_trace, Some(epochs))
        }
    };
    Ok(PreparedSeed {
        seed,
        episode,
        scorer,
        loss_trace,
        epochs,
    })
}

pub struct ScoredPivots {
    pub set: PivotSet,
    pub matrix: ScoreMatrix,
}

/// Score matrices of one seed, computed once and shared by every pooling
/// method.
pub struct ScoredSeed {
    pub matrix: ScoreMatrix,
    pub pivots: Option<ScoredPivots>,
    pub scorer_calls: usize,
}

pub fn score_seed(config: &RunConfig, prepared: &PreparedSeed) -> Result<ScoredSeed, ExperimentError> {
    let seed = Some(prepared.seed);
    let ep = &prepared.episode;
    let counting = CountingScorer::new(&prepared.scorer);
    let matrix = score_matrix(&counting, ep).map_err(at(Stage::Score, seed))?;
    let pivots = if config.pivot_p > 0 {
        let trm = TrainRelevanceMatrix::from_scorer(&counting, &ep.train).map_err(at(Stage::Pivot, seed))?;
        let mut set = select_pivots(&trm, config.pivot_p, config.exclude_self).map_err(at(Stage::Pivot, seed))?;
        set.seed = Some(prepared.seed);
        let columns = set.columns(&ep.train).map_err(at(Stage::Pivot, seed))?;
        let restricted: Vec<_> = columns.iter().map(|&c| ep.train[c].clone()).collect();
        let pm = score_samples(&counting, &ep.query, &restricted).map_err(at(Stage::Pivot, seed))?;
        Some(ScoredPivots { set, matrix: pm })
    } else {
        None
    };
    Ok(ScoredSeed {
        matrix,
        pivots,
        scorer_calls: counting.calls(),
    })
}

pub struct SeedOutcome {
    pub result: SeedResult,
    pub predictions_csv: String,
    pub pivot_predictions_csv: Option<String>,
}

pub fn pool_seed(
    prepared: &PreparedSeed,
    scored: &ScoredSeed,
    method: PoolingMethod,
) -> Result<SeedOutcome, ExperimentError> {
    let seed = Some(prepared.seed);
    let ep = &prepared.episode;
    let gold: HashMap<String, String> = ep.query.iter().map(|s| (s.id.clone(), s.label.clone())).collect();
    let preds = classify_matrix(&scored.matrix, method).map_err(at(Stage::Pool, seed))?;
    let acc = accuracy(&preds, &gold).map_err(at(Stage::Analysis, seed))?;
    let counts = ep.train_label_counts();
    let by_size = predictions_by_class_size(&preds, &counts).map_err(at(Stage::Analysis, seed))?;
    let (pivot_accuracy, pivot_pairs, pivot_csv) = match &scored.pivots {
        Some(p) => {
            let pp = classify_matrix(&p.matrix, method).map_err(at(Stage::Pool, seed))?;
            let a = accuracy(&pp, &gold).map_err(at(Stage::Analysis, seed))?;
            (Some(a), Some(p.matrix.cols()), Some(predictions_csv(&pp, &gold, method)))
        }
        None => (None, None, None),
    };
    Ok(SeedOutcome {
        result: SeedResult {
            seed: prepared.seed,
            accuracy: acc,
            pivot_accuracy,
            prediction_count_stddev: prediction_count_stddev(&preds, &ep.labels),
            train_label_counts: counts,
            predictions_by_class_size: by_size,
            pairs_per_query: scored.matrix.cols(),
            pivot_pairs_per_query: pivot_pairs,
            scorer_calls: scored.scorer_calls,
            loss_trace: prepared.loss_trace.clone(),
        },
        predictions_csv: predictions_csv(&preds, &gold, method),
        pivot_predictions_csv: pivot_csv,
    })
}

fn write(path: &Path, content: &str, seed: Option<u64>) -> Result<(), ExperimentError> {
    fs::write(path, content).map_err(|e| ExperimentError::Pipeline {
        stage: Stage::Write,
        seed,
        message: format!("{}: {e}", path.display()),
    })
}

pub fn run_dir(output_dir: &Path, config_hash: &str) -> PathBuf {
    output_dir.join(config_hash)
}

pub fn seed_dir(output_dir: &Path, config_hash: &str, seed: u64) -> PathBuf {
    run_dir(output_dir, config_hash).join(format!("seed-{seed}"))
}

/// `episode.json` content: the episode record tagged with its config hash
/// and seed.
pub fn episode_document(config_hash: &str, episode: &Episode) -> String {
    let doc = json!({
        "config_hash": config_hash,
        "seed": episode.seed,
        "episode": episode.to_record(),
    });
    serde_json::to_string_pretty(&doc).expect("json") + "\n"
}

#[derive(Deserialize)]
struct EpisodeDocument {
    config_hash: String,
    seed: u64,
    episode: EpisodeRecord,
}

/// Reads an `episode.json` and rebuilds the episode from its datasets.
/// Returns the config hash it was written under.
pub fn read_episode_document(path: &Path, data: &Datasets) -> Result<(String, Episode), ExperimentError> {
    let fail = |message: String| ExperimentError::Pipeline {
        stage: Stage::Load,
        seed: None,
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let doc: EpisodeDocument =
        serde_json::from_str(&text).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let mut ep = doc
        .episode
        .resolve(&data.main, data.ood.as_ref())
        .map_err(|e| fail(format!("{}: {e}", path.display())))?;
    ep.seed = doc.seed;
    Ok((doc.config_hash, ep))
}

fn write_seed_artifacts(
    dir: &Path,
    config_hash: &str,
    prepared: &PreparedSeed,
    scored: &ScoredSeed,
    outcome: &SeedOutcome,
) -> Result<(), ExperimentError> {
    let seed = Some(prepared.seed);
    fs::create_dir_all(dir).map_err(at(Stage::Write, seed))?;
    write(&dir.join("episode.json"), &episode_document(config_hash, &prepared.episode), seed)?;
    if let ActiveScorer::TinyMlm(s) = &prepared.scorer {
        let provenance = Provenance {
            config_hash: config_hash.to_string(),
            seed: prepared.seed,
        };
        write(&dir.join("checkpoint.json"), &Checkpoint::from_scorer(s, Some(provenance)).to_json(), seed)?;
    }
    write(&dir.join("scores.csv"), &scored.matrix.to_csv(), seed)?;
    write(&dir.join("predictions.csv"), &outcome.predictions_csv, seed)?;
    let profile = score_profile(&scored.matrix).map_err(at(Stage::Analysis, seed))?;
    write(&dir.join("profile.csv"), &profile_csv(&profile), seed)?;
    if let (Some(p), Some(csv)) = (&scored.pivots, &outcome.pivot_predictions_csv) {
        write(&dir.join("pivots.json"), &(p.set.to_json() + "\n"), seed)?;
        write(&dir.join("scores_pivot.csv"), &p.matrix.to_csv(), seed)?;
        write(&dir.join("predictions_pivot.csv"), csv, seed)?;
    }
    Ok(())
}

fn build_report(config: &RunConfig, dataset: &str, mut runs: Vec<SeedResult>) -> Result<ExperimentReport, ExperimentError> {
    runs.sort_by_key(|r| r.seed);
    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let summary = aggregate_runs(&accs).map_err(at(Stage::Analysis, None))?;
    let pivot_mean = if config.pivot_p > 0 {
        let p: Vec<f64> = runs.iter().filter_map(|r| r.pivot_accuracy).collect();
        Some(aggregate_runs(&p).map_err(at(Stage::Analysis, None))?.mean)
    } else {
        None
    };
    let maps: Vec<_> = runs.iter().map(|r| r.predictions_by_class_size.clone()).collect();
    Ok(ExperimentReport {
        config_hash: config.hash(),
        dataset: dataset.to_string(),
        shots: config.shots,
        query_size: config.query_size,
        scorer: config.scorer.to_string(),
        aggregate: config.aggregate.to_string(),
        pooling: config.pooling_method().to_string(),
        noise: config.noise,
        ood_source: config.ood_dataset_path.as_ref().map(|_| {
            config
                .ood_dataset_name
                .clone()
                .unwrap_or_else(|| config.ood_dataset_path.clone().unwrap_or_default())
        }),
        pivot_p: (config.pivot_p > 0).then_some(config.pivot_p),
        epochs: match config.scorer {
            ScorerKind::TinyMlm => Some(epochs_for_config(config, dataset)),
            ScorerKind::Lexical => None,
        },
        seeds: runs.iter().map(|r| r.seed).collect(),
        per_seed_accuracy: summary.per_seed,
        mean_accuracy: summary.mean,
        pivot_mean_accuracy: pivot_mean,
        mean_prediction_count_stddev: runs.iter().map(|r| r.prediction_count_stddev).sum::<f64>() / runs.len() as f64,
        predictions_by_class_size: average_class_size_maps(&maps),
        runs,
    })
}

fn write_run_files(config: &RunConfig, report: &ExperimentReport) -> Result<(), ExperimentError> {
    if let Some(out) = &config.output_dir {
        let dir = run_dir(out, &report.config_hash);
        fs::create_dir_all(&dir).map_err(at(Stage::Write, None))?;
        write(&dir.join("config.json"), &RunConfig { output_dir: None, ..config.clone() }.to_json(), None)?;
        write(&dir.join("report.json"), &report.to_json(), None)?;
        write(&dir.join("report.txt"), &report.to_text(), None)?;
    }
    Ok(())
}

fn sorted_seeds(config: &RunConfig) -> Vec<u64> {
    let mut s = config.seeds.clone();
    s.sort_unstable();
    s
}

/// Runs every seed of `config` and aggregates the results.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentReport, ExperimentError> {
    config.validate()?;
    let data = load_datasets(config)?;
    let hash = config.hash();
    let method = config.pooling_method();
    let mut runs = Vec::new();
    for seed in sorted_seeds(config) {
        let prepared = prepare_seed(config, &data, seed)?;
        let scored = score_seed(config, &prepared)?;
        let outcome = pool_seed(&prepared, &scored, method)?;
        if let Some(out) = &config.output_dir {
            write_seed_artifacts(&seed_dir(out, &hash, seed), &hash, &prepared, &scored, &outcome)?;
        }
        runs.push(outcome.result);
    }
    let report = build_report(config, data.main.name(), runs)?;
    write_run_files(config, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Shots,
    Noise,
    PivotP,
    Pooling,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Shots => "shots",
            SweepAxis::Noise => "noise",
            SweepAxis::PivotP => "pivot_p",
            SweepAxis::Pooling => "pooling",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shots" => Ok(SweepAxis::Shots),
            "noise" => Ok(SweepAxis::Noise),
            "pivot_p" | "pivot-p" | "pivots" => Ok(SweepAxis::PivotP),
            "pooling" => Ok(SweepAxis::Pooling),
            other => Err(format!("unknown sweep axis {other:?} (expected shots|noise|pivot_p|pooling)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ExperimentReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub base_config_hash: String,
    pub cells: Vec<SweepCell>,
    /// Scorer invocations across the whole sweep.
    pub scorer_calls: usize,
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let cell_str = |f: &dyn Fn(&ExperimentReport) -> Option<String>| -> Vec<String> {
            self.cells
                .iter()
                .map(|c| match &c.report {
                    Some(r) => f(r).unwrap_or_else(|| "-".into()),
                    None => "FAILED".into(),
                })
                .collect()
        };
        let mut header = vec![self.axis.to_string()];
        header.extend(self.cells.iter().map(|c| c.value.clone()));
        let mut rows = vec![header];
        let mut row = |name: &str, values: Vec<String>| {
            let mut r = vec![name.to_string()];
            r.extend(values);
            rows.push(r);
        };
        row("accuracy", cell_str(&|r| Some(pp(r.mean_accuracy))));
        if self.cells.iter().any(|c| c.report.as_ref().is_some_and(|r| r.pivot_mean_accuracy.is_some())) {
            row("pivot accuracy", cell_str(&|r| r.pivot_mean_accuracy.map(pp)));
        }
        if self.axis == SweepAxis::Noise {
            let clean = self
                .cells
                .iter()
                .find(|c| c.value == "0")
                .and_then(|c| c.report.as_ref())
                .map(|r| r.mean_accuracy * 100.0);
            row(
                "drop vs m=0",
                cell_str(&|r| match clean {
                    Some(c) if r.noise > 0 => Some(format!("{:.2}", performance_drop(c, r.mean_accuracy * 100.0))),
                    _ => None,
                }),
            );
        }
        row("count stddev", cell_str(&|r| Some(format!("{:.2}", r.mean_prediction_count_stddev))));
        let mut out = aligned_table(&rows);
        for c in &self.cells {
            if let Some(e) = &c.error {
                out.push_str(&format!("{} = {}: {e}\n", self.axis, c.value));
            }
        }
        out
    }
}

fn cell_config(base: &RunConfig, axis: SweepAxis, value: &str) -> Result<RunConfig, ExperimentError> {
    let number = || {
        value
            .parse::<usize>()
            .map_err(|_| ExperimentError::Config(format!("{axis} value {value:?} is not a count")))
    };
    let mut c = base.clone();
    match axis {
        SweepAxis::Shots => c.shots = number()?,
        SweepAxis::Noise => c.noise = number()?,
        SweepAxis::PivotP => c.pivot_p = number()?,
        SweepAxis::Pooling => {
            c.pooling = value.parse().map_err(ExperimentError::Config)?;
            c.knn_k = None;
        }
    }
    c.validate()?;
    Ok(c)
}

/// One experiment per axis value with shared seeds. Failed cells are kept
/// and marked. The pooling axis trains and scores once per seed and pools
/// the same matrices with every method.
pub fn run_sweep(base: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<SweepReport, ExperimentError> {
    base.validate()?;
    if values.is_empty() {
        return Err(ExperimentError::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| cell_config(base, axis, v))
        .collect::<Result<Vec<_>, _>>()?;
    let (cells, scorer_calls) = if axis == SweepAxis::Pooling {
        pooling_sweep(base, values, &configs)?
    } else {
        let mut calls = 0;
        let cells = values
            .iter()
            .zip(&configs)
            .map(|(v, c)| match run_experiment(c) {
                Ok(r) => {
                    calls += r.runs.iter().map(|s| s.scorer_calls).sum::<usize>();
                    SweepCell {
                        value: v.clone(),
                        report: Some(r),
                        error: None,
                    }
                }
                Err(e) => SweepCell {
                    value: v.clone(),
                    report: None,
                    error: Some(e.to_string()),
                },
            })
            .collect();
        (cells, calls)
    };
    let report = SweepReport {
        axis,
        base_config_hash: base.hash(),
        cells,
        scorer_calls,
    };
    if let Some(out) = &base.output_dir {
        let dir = out.join(format!("sweep-{axis}-{}", base.hash()));
        fs::create_dir_all(&dir).map_err(at(Stage::Write, None))?;
        write(&dir.join("sweep.json"), &report.to_json(), None)?;
        write(&dir.join("sweep.txt"), &report.to_text(), None)?;
    }
    Ok(report)
}

fn pooling_sweep(
    base: &RunConfig,
    values: &[String],
    configs: &[RunConfig],
) -> Result<(Vec<SweepCell>, usize), ExperimentError> {
    let data = load_datasets(base)?;
    for c in configs {
        check_against(c, &data.main)?;
    }
    let mut runs: Vec<Result<Vec<SeedResult>, String>> = vec![Ok(Vec::new()); configs.len()];
    let mut calls = 0;
    for seed in sorted_seeds(base) {
        let scored = prepare_seed(base, &data, seed).and_then(|p| score_seed(base, &p).map(|s| (p, s)));
        let (prepared, scored) = match scored {
            Ok(x) => x,
            Err(e) => {
                for r in &mut runs {
                    if r.is_ok() {
                        *r = Err(e.to_string());
                    }
                }
                continue;
            }
        };
        calls += scored.scorer_calls;
        for (cfg, slot) in configs.iter().zip(&mut runs) {
            let Ok(results) = slot else { continue };
            let outcome = pool_seed(&prepared, &scored, cfg.pooling_method()).and_then(|o| {
                if let Some(out) = &cfg.output_dir {
                    let hash = cfg.hash();
                    write_seed_artifacts(&seed_dir(out, &hash, seed), &hash, &prepared, &scored, &o)?;
                }
                Ok(o)
            });
            match outcome {
                Ok(o) => results.push(o.result),
                Err(e) => *slot = Err(e.to_string()),
            }
        }
    }
    let cells = values
        .iter()
        .zip(configs)
        .zip(runs)
        .map(|((v, cfg), r)| {
            let report = r.and_then(|runs| {
                let report = build_report(cfg, data.main.name(), runs).map_err(|e| e.to_string())?;
                write_run_files(cfg, &report).map_err(|e| e.to_string())?;
                Ok(report)
            });
            match report {
                Ok(rep) => SweepCell {
                    value: v.clone(),
                    report: Some(rep),
                    error: None,
                },
                Err(e) => SweepCell {
                    value: v.clone(),
                    report: None,
                    error: Some(e),
                },
            }
        })
        .collect();
    Ok((cells, calls))
}

/// Config checks that need the dataset's label count.
fn check_against(config: &RunConfig, main: &Dataset) -> Result<(), ExperimentError> {
    let train_size = config.shots * main.label_set().len();
    if let PoolingMethod::Knn { k: Some(k) } = config.pooling_method() {
        if k > train_size {
            return Err(ExperimentError::Config(format!(
                "knn k = {k} exceeds the training set size {train_size}"
            )));
        }
    }
    if config.noise > train_size {
        return Err(ExperimentError::Config(format!(
            "noise {} exceeds the training set size {train_size}",
            config.noise
        )));
    }
    Ok(())
}
