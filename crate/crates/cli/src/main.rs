//! `metricprompt` command-line runner.
//!
//! Every subcommand reads an optional JSON config (`--config`) and applies
//! flag overrides key by key. Exit codes: 0 success, 1 configuration error,
//! 2 pipeline failure.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metricprompt::analysis::{pp, prediction_count_stddev, predictions_by_class_size, profile_csv, score_profile, ExperimentReport};
use metricprompt::corpus::Episode;
use metricprompt::experiment::{
    episode_document, load_datasets, read_episode_document, run_experiment, run_sweep, sample_seed_episode, seed_dir,
    train_scorer, ActiveScorer, Datasets, ExperimentError, RunConfig, ScorerKind, SweepAxis, SweepReport,
};
use metricprompt::pivot::{pivot_infer, select_pivots, TrainRelevanceMatrix};
use metricprompt::pooling::{classify_matrix, predictions_csv, PoolingMethod, ScoreMatrix};
use metricprompt::scorer::checkpoint::{Checkpoint, Provenance};
use metricprompt::scorer::train::LrSchedule;
use metricprompt::scorer::{score_matrix, Aggregate, CountingScorer, LexicalOverlapScorer};

#[derive(Parser)]
#[command(name = "metricprompt", version, about = "Few-shot text classification as text-pair relevance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample each seed's episode and write episode.json.
    Episode(Common),
    /// Train the tiny scorer for each seed and write checkpoint.json.
    Train(Common),
    /// Score queries against the full training set and pool.
    Infer(Common),
    /// Select pivots and run pivot inference.
    Pivots(Common),
    /// Run the whole pipeline and write the aggregate report.
    Eval(Common),
    /// Run one experiment per value of a single config axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// shots | noise | pivot_p | pooling
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Print a report.json, a sweep.json, or a seed directory's score analysis.
    Analyze {
        path: PathBuf,
        /// Print JSON instead of text where both exist.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    dataset_path: Option<String>,
    #[arg(long)]
    dataset_name: Option<String>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    query_size: Option<usize>,
    /// Comma-separated seeds; `a-b` ranges are inclusive.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    scorer: Option<ScorerKind>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_width: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_schedule: Option<LrSchedule>,
    /// A positive number, or `none` to disable clipping.
    #[arg(long, value_parser = parse_clip)]
    max_grad_norm: Option<Clip>,
    #[arg(long)]
    token_dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    aggregate: Option<Aggregate>,
    /// mean | max | knn | knn:<k>
    #[arg(long)]
    pooling: Option<PoolingMethod>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    noise: Option<usize>,
    #[arg(long)]
    ood_dataset_path: Option<String>,
    #[arg(long)]
    ood_dataset_name: Option<String>,
    #[arg(long)]
    ood_shots: Option<usize>,
    #[arg(long)]
    pivot_p: Option<usize>,
    #[arg(long)]
    exclude_self: Option<bool>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

#[derive(Clone, Copy)]
struct Clip(Option<f64>);

fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |t: &str| t.trim().parse::<u64>().map_err(|_| format!("bad seed {t:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty seed range {part:?}"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    Ok(SeedList(out))
}

fn parse_clip(s: &str) -> std::result::Result<Clip, String> {
    if s == "none" {
        return Ok(Clip(None));
    }
    s.parse().map(|v| Clip(Some(v))).map_err(|_| format!("bad clip norm {s:?}"))
}

impl Overrides {
    fn apply(self, c: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { c.$field = v; })*
            };
        }
        macro_rules! set_some {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { c.$field = Some(v); })*
            };
        }
        set!(
            dataset_path, shots, query_size, template, max_tokens, scorer, width, blocks, heads, ff_width,
            learning_rate, batch_size, weight_decay, lr_schedule, token_dropout, aggregate, pooling, noise,
            ood_shots, pivot_p, exclude_self
        );
        set_some!(dataset_name, epochs, knn_k, ood_dataset_path, ood_dataset_name, output_dir);
        if let Some(SeedList(s)) = self.seeds {
            c.seeds = s;
        }
        if let Some(Clip(n)) = self.max_grad_norm {
            c.max_grad_norm = n;
        }
    }
}

enum CliError {
    Config(String),
    Pipeline(String),
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => CliError::Config(e.to_string()),
            ExperimentError::Pipeline { .. } => CliError::Pipeline(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn pipeline(e: impl std::fmt::Display) -> CliError {
    CliError::Pipeline(e.to_string())
}

fn load_config(common: Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    common.overrides.apply(&mut c);
    c.validate()?;
    Ok(c)
}

fn write(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| pipeline(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, content).map_err(|e| pipeline(format!("{}: {e}", path.display())))
}

fn sorted_seeds(c: &RunConfig) -> Vec<u64> {
    let mut s = c.seeds.clone();
    s.sort_unstable();
    s
}

/// A seed's episode, reused from `episode.json` when the run directory
/// already holds one.
fn episode_for(c: &RunConfig, data: &Datasets, hash: &str, seed: u64) -> Result<Episode> {
    if let Some(out) = &c.output_dir {
        let path = seed_dir(out, hash, seed).join("episode.json");
        if path.exists() {
            let (found, ep) = read_episode_document(&path, data)?;
            if found != hash || ep.seed != seed {
                return Err(pipeline(format!("{} belongs to another run", path.display())));
            }
            return Ok(ep);
        }
        let ep = sample_seed_episode(c, data, seed)?;
        write(&path, &episode_document(hash, &ep))?;
        return Ok(ep);
    }
    Ok(sample_seed_episode(c, data, seed)?)
}

fn train_and_save(c: &RunConfig, ep: &Episode, hash: &str, seed: u64) -> Result<(ActiveScorer, Vec<f64>)> {
    let (scorer, outcome) = train_scorer(c, ep, seed)?;
    if let Some(out) = &c.output_dir {
        let provenance = Provenance {
            config_hash: hash.to_string(),
            seed,
        };
        let path = seed_dir(out, hash, seed).join("checkpoint.json");
        write(&path, &Checkpoint::from_scorer(&scorer, Some(provenance)).to_json())?;
    }
    Ok((ActiveScorer::TinyMlm(Box::new(scorer)), outcome.loss_trace))
}

/// The seed's scorer: lexical, a saved checkpoint, or a fresh training run.
fn scorer_for(c: &RunConfig, ep: &Episode, hash: &str, seed: u64) -> Result<ActiveScorer> {
    if c.scorer == ScorerKind::Lexical {
        return Ok(ActiveScorer::Lexical(LexicalOverlapScorer));
    }
    if let Some(out) = &c.output_dir {
        let path = seed_dir(out, hash, seed).join("checkpoint.json");
        if path.exists() {
            let ck = Checkpoint::load(&path).map_err(|e| pipeline(format!("{}: {e}", path.display())))?;
            if ck.provenance.as_ref().is_some_and(|p| p.config_hash != hash || p.seed != seed) {
                return Err(pipeline(format!("{} belongs to another run", path.display())));
            }
            let s = ck.into_scorer().map_err(|e| pipeline(format!("{}: {e}", path.display())))?;
            return Ok(ActiveScorer::TinyMlm(Box::new(s)));
        }
    }
    Ok(train_and_save(c, ep, hash, seed)?.0)
}

fn gold(ep: &Episode) -> HashMap<String, String> {
    ep.query.iter().map(|s| (s.id.clone(), s.label.clone())).collect()
}

fn accuracy(preds: &[metricprompt::pooling::Prediction], gold: &HashMap<String, String>) -> Result<f64> {
    metricprompt::analysis::accuracy(preds, gold).map_err(pipeline)
}

fn cmd_episode(c: RunConfig) -> Result<()> {
    let data = load_datasets(&c)?;
    let hash = c.hash();
    for seed in sorted_seeds(&c) {
        let ep = episode_for(&c, &data, &hash, seed)?;
        if c.output_dir.is_none() {
            print!("{}", episode_document(&hash, &ep));
        } else {
            let counts: Vec<String> = ep.train_label_counts().iter().map(|(l, n)| format!("{l}={n}")).collect();
            println!(
                "seed {seed}: {} train ({}), {} ood, {} query, {} corrupted",
                ep.train.len(),
                counts.join(" "),
                ep.ood_train.len(),
                ep.query.len(),
                ep.noisy.len()
            );
        }
    }
    Ok(())
}

fn cmd_train(c: RunConfig) -> Result<()> {
    if c.scorer != ScorerKind::TinyMlm {
        return Err(CliError::Config("train needs scorer tiny-mlm".into()));
    }
    let data = load_datasets(&c)?;
    let hash = c.hash();
    for seed in sorted_seeds(&c) {
        let ep = episode_for(&c, &data, &hash, seed)?;
        let (_, trace) = train_and_save(&c, &ep, &hash, seed)?;
        let last = trace.last().copied().unwrap_or(f64::NAN);
        println!("seed {seed}: {} epochs, final loss {last:.6}", trace.len());
    }
    Ok(())
}

fn cmd_infer(c: RunConfig) -> Result<()> {
    let data = load_datasets(&c)?;
    let hash = c.hash();
    let method = c.pooling_method();
    for seed in sorted_seeds(&c) {
        let ep = episode_for(&c, &data, &hash, seed)?;
        let scorer = scorer_for(&c, &ep, &hash, seed)?;
        let counting = CountingScorer::new(&scorer);
        let matrix = score_matrix(&counting, &ep).map_err(pipeline)?;
        let preds = classify_matrix(&matrix, method).map_err(pipeline)?;
        let g = gold(&ep);
        let acc = accuracy(&preds, &g)?;
        if let Some(out) = &c.output_dir {
            let dir = seed_dir(out, &hash, seed);
            write(&dir.join("scores.csv"), &matrix.to_csv())?;
            write(&dir.join("predictions.csv"), &predictions_csv(&preds, &g, method))?;
            let profile = score_profile(&matrix).map_err(pipeline)?;
            write(&dir.join("profile.csv"), &profile_csv(&profile))?;
        }
        println!(
            "seed {seed}: accuracy {} ({method}, {} pairs per query, {} scorer calls)",
            pp(acc),
            matrix.cols(),
            counting.calls()
        );
    }
    Ok(())
}

fn cmd_pivots(c: RunConfig) -> Result<()> {
    if c.pivot_p == 0 {
        return Err(CliError::Config("pivots needs pivot_p >= 1".into()));
    }
    let data = load_datasets(&c)?;
    let hash = c.hash();
    let method = c.pooling_method();
    for seed in sorted_seeds(&c) {
        let ep = episode_for(&c, &data, &hash, seed)?;
        let scorer = scorer_for(&c, &ep, &hash, seed)?;
        let trm = TrainRelevanceMatrix::from_scorer(&scorer, &ep.train).map_err(pipeline)?;
        let mut set = select_pivots(&trm, c.pivot_p, c.exclude_self).map_err(pipeline)?;
        set.seed = Some(seed);
        let inf = pivot_infer(&scorer, &ep, &set, method).map_err(pipeline)?;
        let g = gold(&ep);
        let acc = accuracy(&inf.predictions, &g)?;
        match &c.output_dir {
            Some(out) => {
                let dir = seed_dir(out, &hash, seed);
                write(&dir.join("pivots.json"), &(set.to_json() + "\n"))?;
                write(&dir.join("scores_pivot.csv"), &inf.matrix.to_csv())?;
                write(&dir.join("predictions_pivot.csv"), &predictions_csv(&inf.predictions, &g, method))?;
            }
            None => println!("{}", set.to_json()),
        }
        println!(
            "seed {seed}: pivot accuracy {} ({method}), pairs per query {} -> {}",
            pp(acc),
            ep.train.len(),
            inf.pairs_per_query
        );
    }
    Ok(())
}

fn cmd_eval(c: RunConfig) -> Result<()> {
    let report = run_experiment(&c)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_sweep(c: RunConfig, axis: SweepAxis, values: Vec<String>) -> Result<()> {
    let report = run_sweep(&c, axis, &values)?;
    print!("{}", report.to_text());
    if report.cells.iter().all(|cell| cell.report.is_none()) {
        return Err(CliError::Pipeline("every sweep cell failed".into()));
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| pipeline(format!("{}: {e}", path.display())))
}

/// Score analysis of a seed directory holding `scores.csv` and
/// `episode.json`.
fn analyze_seed_dir(dir: &Path) -> Result<String> {
    let doc: serde_json::Value = serde_json::from_str(&read(&dir.join("episode.json"))?).map_err(pipeline)?;
    let record: metricprompt::corpus::EpisodeRecord =
        serde_json::from_value(doc["episode"].clone()).map_err(pipeline)?;
    let label_of: HashMap<String, String> = record.train.iter().map(|e| (e.id.clone(), e.label.clone())).collect();
    let matrix = ScoreMatrix::from_csv(&read(&dir.join("scores.csv"))?, &label_of).map_err(pipeline)?;
    let counts: Vec<(String, usize)> = record
        .labels
        .iter()
        .map(|l| (l.clone(), record.train.iter().filter(|e| e.label == *l).count()))
        .collect();
    let mut out = String::from("score profile\n");
    out.push_str(&profile_csv(&score_profile(&matrix).map_err(pipeline)?));
    for method in [PoolingMethod::Mean, PoolingMethod::Max, PoolingMethod::knn()] {
        let preds = classify_matrix(&matrix, method).map_err(pipeline)?;
        let by_size = predictions_by_class_size(&preds, &counts).map_err(pipeline)?;
        let sizes: Vec<String> = by_size.iter().map(|(s, v)| format!("{s}:{v:.2}")).collect();
        out.push_str(&format!(
            "{method}: prediction count stddev {:.3}, mean predictions by class size {}\n",
            prediction_count_stddev(&preds, &record.labels),
            sizes.join(" ")
        ));
    }
    Ok(out)
}

fn cmd_analyze(path: PathBuf, json: bool) -> Result<()> {
    let file = if path.is_dir() {
        ["report.json", "sweep.json"].iter().map(|f| path.join(f)).find(|p| p.exists())
    } else {
        Some(path.clone())
    };
    let text = match file {
        Some(f) => {
            let content = read(&f)?;
            if let Ok(r) = serde_json::from_str::<ExperimentReport>(&content) {
                if json { r.to_json() } else { r.to_text() }
            } else if let Ok(s) = serde_json::from_str::<SweepReport>(&content) {
                if json { s.to_json() } else { s.to_text() }
            } else {
                return Err(pipeline(format!("{} is neither a report nor a sweep", f.display())));
            }
        }
        None if path.join("scores.csv").exists() => analyze_seed_dir(&path)?,
        None => return Err(pipeline(format!("nothing to analyze in {}", path.display()))),
    };
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Episode(c) => cmd_episode(load_config(c)?),
        Command::Train(c) => cmd_train(load_config(c)?),
        Command::Infer(c) => cmd_infer(load_config(c)?),
        Command::Pivots(c) => cmd_pivots(load_config(c)?),
        Command::Eval(c) => cmd_eval(load_config(c)?),
        Command::Sweep { common, axis, values } => cmd_sweep(load_config(common)?, axis, values),
        Command::Analyze { path, json } => cmd_analyze(path, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Pipeline(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
