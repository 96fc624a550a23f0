//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Each criterion must also finish within its time budget.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metricprompt::analysis::{epochs_for, prediction_count_stddev, score_profile};
use metricprompt::corpus::{inject_label_noise, mix_ood, sample_episode, Dataset, Episode, Sample};
use metricprompt::experiment::{episode_tokenizer, load_datasets, run_experiment, sample_seed_episode, train_scorer, RunConfig, ScorerKind};
use metricprompt::pivot::{pivot_infer, representativeness, select_pivots, TrainRelevanceMatrix};
use metricprompt::pooling::{classify_matrix, default_k, Decision, LabelScores, PoolingMethod, Prediction, ScoreMatrix};
use metricprompt::prompting::{build_query_pairs, build_training_pairs, PromptTemplate};
use metricprompt::scorer::gradcheck::{grad_check, GradCheckConfig};
use metricprompt::scorer::train::pair_accuracy;
use metricprompt::scorer::{score_matrix, Architecture, CountingScorer, LexicalOverlapScorer, RelevanceScorer, ScorerParams, TinyMlmScorer};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Dataset with `labels` classes; texts mix class words with a shared pool
/// so that lexical scores overlap across classes and tie often.
fn random_dataset(name: &str, labels: usize, per_label: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let mut samples = Vec::new();
    for i in 0..labels * per_label {
        let c = i % labels;
        let len = rng.random_range(2..6);
        let words: Vec<String> = (0..len)
            .map(|_| {
                if rng.random_bool(0.3) {
                    format!("shared{}", rng.random_range(0..4))
                } else {
                    format!("{name}c{c}w{}", rng.random_range(0..5))
                }
            })
            .collect();
        samples.push(Sample {
            id: format!("{name}-{i}"),
            text: words.join(" "),
            label: format!("label{c}"),
            dataset_tag: String::new(),
        });
    }
    Dataset::new(name, samples).expect("valid dataset")
}

fn pair_counts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let template = PromptTemplate::default();
    let mut pivot_checks = 0;
    for case in 0..50 {
        let n = rng.random_range(2..6);
        let k = rng.random_range(1..5);
        let query_size = rng.random_range(1..12);
        let data = random_dataset("main", n, k + query_size, &mut rng);
        let mut ep = sample_episode(&data, k, query_size, case).map_err(|e| e.to_string())?;
        // fewer flips than the smallest class complement, so two labels always survive
        ep = inject_label_noise(&ep, rng.random_range(0..=(n * k - 1) / 2), case).map_err(|e| e.to_string())?;
        if rng.random_bool(0.5) {
            let ood = random_dataset("other", rng.random_range(2..4), 3, &mut rng);
            ep = mix_ood(&ep, &ood, rng.random_range(1..3), case).map_err(|e| e.to_string())?;
        }
        let tok = episode_tokenizer(&ep, &template);
        let train = build_training_pairs(&ep, &template, &tok).len();
        let expect = (n * k + ep.ood_train.len()).pow(2);
        ensure(train == expect, || format!("case {case}: {train} training pairs, expected {expect}"))?;
        let query = build_query_pairs(&ep, &template, &tok).len();
        ensure(query == query_size * n * k, || format!("case {case}: {query} query pairs"))?;

        let p = rng.random_range(1..5);
        let trm = TrainRelevanceMatrix::from_scorer(&LexicalOverlapScorer, &ep.train).map_err(|e| e.to_string())?;
        let set = select_pivots(&trm, p, case % 2 == 0).map_err(|e| e.to_string())?;
        let counting = CountingScorer::new(LexicalOverlapScorer);
        let inf = pivot_infer(&counting, &ep, &set, PoolingMethod::Mean).map_err(|e| e.to_string())?;
        let per_label: usize = ep.train_label_counts().iter().map(|(_, c)| (*c).min(p)).sum();
        ensure(counting.calls() == query_size * per_label, || {
            format!("case {case}: {} scorer calls, expected {}", counting.calls(), query_size * per_label)
        })?;
        ensure(inf.pairs_per_query == per_label, || format!("case {case}: pairs per query"))?;
        pivot_checks += 1;
    }
    Ok(format!("50 configurations, {pivot_checks} pivot call counts"))
}

/// Brute-force reference for `classify`: full sort, recount, rescan.
fn oracle(row: &[f64], labels: &[String], method: PoolingMethod) -> Decision {
    let mut order: Vec<String> = Vec::new();
    for l in labels {
        if !order.contains(l) {
            order.push(l.clone());
        }
    }
    let columns_of = |l: &String| -> Vec<usize> { (0..row.len()).filter(|&c| labels[c] == *l).collect() };
    match method {
        PoolingMethod::Mean | PoolingMethod::Max => {
            let mut scores = IndexMap::new();
            for l in &order {
                let cols = columns_of(l);
                let v = if method == PoolingMethod::Mean {
                    let mut sum = 0.0;
                    for &c in &cols {
                        sum += row[c];
                    }
                    sum / cols.len() as f64
                } else {
                    let mut best = row[cols[0]];
                    for &c in &cols {
                        if row[c] > best {
                            best = row[c];
                        }
                    }
                    best
                };
                scores.insert(l.clone(), v);
            }
            let mut best = &order[0];
            for l in &order {
                if scores[l] > scores[best] {
                    best = l;
                }
            }
            let ties = order.iter().filter(|l| scores[*l] == scores[best]).count();
            Decision {
                label: best.clone(),
                per_label: LabelScores::Scores(scores),
                tie_broken: ties > 1,
            }
        }
        PoolingMethod::Knn { k } => {
            let k = k.unwrap_or(std::cmp::max(1, row.len() / 2));
            let mut pairs: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
            // bubble sort: descending score, ascending column
            for i in 0..pairs.len() {
                for j in 0..pairs.len() - 1 - i {
                    let (a, b) = (pairs[j], pairs[j + 1]);
                    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                        pairs.swap(j, j + 1);
                    }
                }
            }
            let mut votes: IndexMap<String, usize> = IndexMap::new();
            for l in &order {
                let n = pairs[..k].iter().filter(|(_, c)| labels[*c] == *l).count();
                votes.insert(l.clone(), n);
            }
            let top = *votes.values().max().unwrap();
            let tied: Vec<&String> = order.iter().filter(|l| votes[*l] == top).collect();
            let label = pairs
                .iter()
                .map(|(_, c)| &labels[*c])
                .find(|l| tied.contains(l))
                .unwrap()
                .clone();
            Decision {
                label,
                per_label: LabelScores::Votes(votes),
                tie_broken: tied.len() > 1,
            }
        }
    }
}

/// Row values on a coarse grid so that exact ties are common.
fn random_row(rng: &mut ChaCha8Rng, cols: usize) -> Vec<f64> {
    let levels = rng.random_range(1..6);
    match rng.random_range(0..3) {
        0 => (0..cols).map(|_| rng.random_range(0.0..1.0)).collect(),
        1 => (0..cols).map(|_| rng.random_range(0..levels) as f64 / 4.0).collect(),
        _ => vec![0.25; cols],
    }
}

fn random_labels(rng: &mut ChaCha8Rng, cols: usize) -> Vec<String> {
    let n = rng.random_range(1..=cols.min(6));
    let mut labels: Vec<String> = (0..cols).map(|c| format!("l{}", c % n)).collect();
    labels.shuffle(rng);
    labels
}

fn methods(rng: &mut ChaCha8Rng, cols: usize) -> Vec<PoolingMethod> {
    vec![
        PoolingMethod::Mean,
        PoolingMethod::Max,
        PoolingMethod::Knn { k: None },
        PoolingMethod::Knn {
            k: Some(rng.random_range(1..=cols)),
        },
    ]
}

fn pooling_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut rows_checked = 0;
    let mut ties = 0;
    for m in 0..1000 {
        let rows = rng.random_range(1..=20);
        let cols = rng.random_range(1..=60);
        let labels = random_labels(&mut rng, cols);
        let row_data: Vec<Vec<f64>> = (0..rows).map(|_| random_row(&mut rng, cols)).collect();
        let matrix = ScoreMatrix::new(row_data.concat(), ids("q", rows), ids("t", cols), labels.clone())
            .map_err(|e| e.to_string())?;
        for method in methods(&mut rng, cols) {
            let got = classify_matrix(&matrix, method).map_err(|e| e.to_string())?;
            for (q, p) in got.iter().enumerate() {
                let want = oracle(matrix.row(q), &labels, method);
                let same = p.label == want.label && p.per_label == want.per_label && p.tie_broken == want.tie_broken;
                ensure(same, || format!("matrix {m}, row {q}, {method}: {p:?} vs {want:?}"))?;
                ties += usize::from(p.tie_broken);
                rows_checked += 1;
            }
        }
    }
    ensure(ties > 0, || "no tie constructions were exercised".into())?;
    Ok(format!("{rows_checked} rows, {ties} tie-broken decisions"))
}

fn labels_of(p: &[Prediction]) -> Vec<(String, bool)> {
    p.iter().map(|p| (p.label.clone(), p.tie_broken)).collect()
}

fn transform_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let monotone: [(&str, fn(f64) -> f64); 4] = [
        ("exp", f64::exp),
        ("cube", |x| x * x * x + x),
        ("tanh", f64::tanh),
        ("log", |x| (x + 2.0).ln()),
    ];
    for m in 0..200 {
        let rows = rng.random_range(1..=10);
        let cols = rng.random_range(1..=40);
        let labels = random_labels(&mut rng, cols);
        // a 1/64 grid keeps every shifted and scaled sum exact
        let scores: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-64..=64) as f64 / 64.0).collect();
        let build = |s: Vec<f64>| ScoreMatrix::new(s, ids("q", rows), ids("t", cols), labels.clone()).unwrap();
        let base = build(scores.clone());
        let c = rng.random_range(-32..=32) as f64 / 8.0;
        let alpha = [0.5, 2.0, 3.0, 1.25, 0.75][rng.random_range(0..5)];
        let shifted = build(scores.iter().map(|s| s + c).collect());
        let scaled = build(scores.iter().map(|s| s * alpha).collect());
        for method in methods(&mut rng, cols) {
            let want = labels_of(&classify_matrix(&base, method).unwrap());
            for (name, t) in [("shift", &shifted), ("scale", &scaled)] {
                let got = labels_of(&classify_matrix(t, method).unwrap());
                ensure(got == want, || format!("matrix {m}: {method} changed under {name}"))?;
            }
            if matches!(method, PoolingMethod::Knn { .. }) {
                for (name, f) in monotone {
                    let got = labels_of(&classify_matrix(&build(scores.iter().map(|&s| f(s)).collect()), method).unwrap());
                    ensure(got == want, || format!("matrix {m}: {method} changed under {name}"))?;
                }
            }
        }
    }
    Ok("200 matrices".into())
}

fn pivot_saturation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let all = [PoolingMethod::Mean, PoolingMethod::Max, PoolingMethod::knn()];
    let mut tiny = 0;
    for case in 0..200u64 {
        let n = rng.random_range(2..5);
        let k = rng.random_range(1..5);
        let data = random_dataset("main", n, k + 6, &mut rng);
        let mut ep = sample_episode(&data, k, 6, case).map_err(|e| e.to_string())?;
        ep = inject_label_noise(&ep, rng.random_range(0..=(n * k - 1) / 2), case).map_err(|e| e.to_string())?;
        let scorer: Box<dyn RelevanceScorer> = if case % 20 == 0 {
            tiny += 1;
            let template = PromptTemplate::default();
            let tok = episode_tokenizer(&ep, &template);
            let arch = Architecture::toy(tok.len(), template.max_sequence_len());
            let params = ScorerParams::init(arch, case).map_err(|e| e.to_string())?;
            Box::new(TinyMlmScorer::new(params, tok, template, Default::default()).map_err(|e| e.to_string())?)
        } else {
            Box::new(LexicalOverlapScorer)
        };
        let p = ep.train_label_counts().iter().map(|(_, c)| *c).max().unwrap();
        let trm = TrainRelevanceMatrix::from_scorer(&scorer, &ep.train).map_err(|e| e.to_string())?;
        let set = select_pivots(&trm, p, case % 2 == 1).map_err(|e| e.to_string())?;
        let full = score_matrix(&scorer, &ep).map_err(|e| e.to_string())?;
        for method in all {
            let want = classify_matrix(&full, method).map_err(|e| e.to_string())?;
            let got = pivot_infer(&scorer, &ep, &set, method).map_err(|e| e.to_string())?;
            ensure(got.predictions == want, || format!("episode {case}: {method} differs"))?;
        }
    }
    Ok(format!("200 episodes ({tiny} with an untrained tiny scorer)"))
}

fn square(rng: &mut ChaCha8Rng) -> TrainRelevanceMatrix {
    let n = rng.random_range(3..30);
    let classes = rng.random_range(2..=n.min(5));
    let mut labels: Vec<String> = (0..n).map(|i| format!("l{}", i % classes)).collect();
    labels.shuffle(rng);
    let names = ids("t", n);
    let scores = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    TrainRelevanceMatrix::new(ScoreMatrix::new(scores, names.clone(), names, labels).unwrap()).unwrap()
}

fn representativeness_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let m = square(&mut rng);
        let exclude = case % 2 == 0;
        let c = rng.random_range(-5.0..5.0);
        let shifted = m.map(|x| x + c);
        for i in 0..m.len() {
            let d = (representativeness(&m, i, exclude).unwrap() - representativeness(&shifted, i, exclude).unwrap()).abs();
            worst = worst.max(d);
        }
        ensure(worst < 1e-12, || format!("matrix {case}: |dr| = {worst:e}"))?;
        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
        let affine = m.map(|x| a * x + b);
        let want = select_pivots(&m, m.len(), exclude).unwrap();
        let got = select_pivots(&affine, m.len(), exclude).unwrap();
        ensure(got == want, || format!("matrix {case}: ranking changed under {a}x + {b}"))?;
    }
    Ok(format!("200 matrices, max |dr| = {worst:.1e}"))
}

fn gradient_check() -> Check {
    let cfg = RunConfig {
        dataset_path: "builtin:synthetic-4class".into(),
        shots: 1,
        query_size: 4,
        ..RunConfig::default()
    };
    let data = load_datasets(&cfg).map_err(|e| e.to_string())?;
    let ep = sample_seed_episode(&cfg, &data, 1).map_err(|e| e.to_string())?;
    let template = cfg.prompt_template().map_err(|e| e.to_string())?;
    let tok = episode_tokenizer(&ep, &template);
    let arch = cfg.architecture(tok.len(), template.max_sequence_len());
    let params = ScorerParams::init(arch, 6).map_err(|e| e.to_string())?;
    let scorer = TinyMlmScorer::new(params, tok, template, cfg.aggregate).map_err(|e| e.to_string())?;
    let pairs = build_training_pairs(&ep, scorer.template(), scorer.tokenizer());
    // two self-pairs and two cross-class pairs
    let batch = vec![pairs[0].clone(), pairs[1].clone(), pairs[5].clone(), pairs[6].clone()];
    let config = GradCheckConfig {
        per_tensor: Some(64),
        ..GradCheckConfig::default()
    };
    let report = grad_check(scorer.params(), &batch, scorer.objective(), &config).map_err(|e| e.to_string())?;
    ensure(report.max_relative_error < 1e-4, || {
        let worst = report
            .tensors
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
            .unwrap();
        format!("max relative error {:.3e} in {}", report.max_relative_error, worst.name)
    })?;
    Ok(format!(
        "{} coordinates over {} tensors, max relative error {:.2e}, max absolute error {:.2e}",
        report.checked,
        report.tensors.len(),
        report.max_relative_error,
        report.max_abs_error
    ))
}

fn overfit() -> Check {
    let cfg = RunConfig {
        dataset_path: "builtin:synthetic-2class".into(),
        shots: 4,
        query_size: 10,
        ..RunConfig::default()
    };
    let data = load_datasets(&cfg).map_err(|e| e.to_string())?;
    let ep = sample_seed_episode(&cfg, &data, 1).map_err(|e| e.to_string())?;
    let (scorer, out) = train_scorer(&cfg, &ep, 1).map_err(|e| e.to_string())?;
    let pairs = build_training_pairs(&ep, scorer.template(), scorer.tokenizer());
    let acc = pair_accuracy(scorer.params(), &pairs, scorer.objective()).map_err(|e| e.to_string())?;
    ensure(acc >= 0.99, || format!("training-pair accuracy {acc}"))?;
    let trace = &out.loss_trace;
    let half = trace.len() / 2;
    for e in half..trace.len() - 1 {
        ensure(trace[e + 1] <= trace[e] + 1e-3, || {
            format!("loss rises from {:.5} to {:.5} at epoch {}", trace[e], trace[e + 1], e + 1)
        })?;
    }
    Ok(format!(
        "{} pairs, {} epochs, accuracy {acc:.3}, final loss {:.4}",
        pairs.len(),
        trace.len(),
        trace[trace.len() - 1]
    ))
}

fn end_to_end() -> Check {
    let base = RunConfig {
        dataset_path: "builtin:synthetic-4class".into(),
        shots: 4,
        query_size: 200,
        seeds: vec![1, 2, 3],
        pooling: PoolingMethod::Mean,
        ..RunConfig::default()
    };
    let lexical = run_experiment(&RunConfig {
        scorer: ScorerKind::Lexical,
        ..base.clone()
    })
    .map_err(|e| e.to_string())?;
    ensure(lexical.mean_accuracy >= 0.95, || format!("lexical mean accuracy {:.4}", lexical.mean_accuracy))?;
    let tiny = run_experiment(&base).map_err(|e| e.to_string())?;
    ensure(tiny.mean_accuracy >= 0.90, || format!("tiny mean accuracy {:.4}", tiny.mean_accuracy))?;
    Ok(format!(
        "lexical {:.4} {:?}, tiny {:.4} {:?}",
        lexical.mean_accuracy, lexical.per_seed_accuracy, tiny.mean_accuracy, tiny.per_seed_accuracy
    ))
}

fn knn_class_size_bias() -> Check {
    // classes a, b, c with 7, 8 and 9 training samples
    let sizes = [("a", 7), ("b", 8), ("c", 9)];
    let labels: Vec<String> = sizes
        .iter()
        .flat_map(|(l, n)| std::iter::repeat_n(l.to_string(), *n))
        .collect();
    let cols = labels.len();
    let eps = 1e-3;
    // query type t favours class t under mean pooling: one of its columns
    // gets a 10ε bump; every c column gets ε
    let mut scores = Vec::new();
    let queries = 30;
    for q in 0..queries {
        let target = sizes[q % 3].0;
        let first = labels.iter().position(|l| l == target).unwrap();
        for (j, l) in labels.iter().enumerate() {
            let mut s = 0.5;
            if j == first && target != "c" {
                s += 10.0 * eps;
            }
            if l == "c" {
                s += eps;
            }
            scores.push(s);
        }
    }
    let spread = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) - scores.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(spread <= 0.011, || format!("scores spread {spread}"))?;
    let matrix = ScoreMatrix::new(scores, ids("q", queries), ids("t", cols), labels).unwrap();
    let label_set: Vec<String> = sizes.iter().map(|(l, _)| l.to_string()).collect();
    let knn = classify_matrix(&matrix, PoolingMethod::knn()).unwrap();
    let mean = classify_matrix(&matrix, PoolingMethod::Mean).unwrap();
    ensure(default_k(cols) == 12, || "k".into())?;
    let knn_c = knn.iter().filter(|p| p.label == "c").count();
    ensure(knn_c == queries, || format!("KNN predicted c for {knn_c} of {queries} queries"))?;
    for l in &label_set {
        let n = mean.iter().filter(|p| p.label == *l).count();
        ensure(n == queries / 3, || format!("mean pooling predicted {l} {n} times"))?;
    }
    let (sk, sm) = (prediction_count_stddev(&knn, &label_set), prediction_count_stddev(&mean, &label_set));
    ensure(sm < sk, || format!("mean stddev {sm} is not below KNN stddev {sk}"))?;
    ensure(sk == 200f64.sqrt() && sm == 0.0, || format!("stddev {sk} / {sm}"))?;
    Ok(format!("KNN stddev {sk:.3}, mean stddev {sm:.3}"))
}

fn one_shot_self_pairs() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let template = PromptTemplate::default();
    let four = metricprompt::synthetic::four_class();
    let mut datasets = vec![four];
    for _ in 0..5 {
        datasets.push(random_dataset("main", rng.random_range(2..6), 4, &mut rng));
    }
    for (d, data) in datasets.iter().enumerate() {
        let ep: Episode = sample_episode(data, 1, 2, d as u64).map_err(|e| e.to_string())?;
        let tok = episode_tokenizer(&ep, &template);
        let pairs = build_training_pairs(&ep, &template, &tok);
        let positives: BTreeSet<_> = pairs
            .iter()
            .filter(|p| p.y == Some(1))
            .map(|p| (p.left.clone(), p.right.clone()))
            .collect();
        let selfs: BTreeSet<_> = ep
            .train
            .iter()
            .map(|s| {
                let k = metricprompt::prompting::SampleKey::from(s);
                (k.clone(), k)
            })
            .collect();
        ensure(positives == selfs, || format!("dataset {d}: positives are not the self-pairs"))?;
        ensure(selfs.len() == data.label_set().len(), || format!("dataset {d}: {} self-pairs", selfs.len()))?;
    }
    Ok("6 datasets".into())
}

fn epochs_table() -> Check {
    let table = [
        ("agnews", [120, 60, 30, 15]),
        ("dbpedia", [32, 16, 8, 4]),
        ("yahoo", [36, 18, 9, 5]),
    ];
    for (name, row) in table {
        for (shots, want) in [2, 4, 8, 16].into_iter().zip(row) {
            let got = epochs_for(name, shots);
            ensure(got == want, || format!("{name} {shots}-shot: {got}, expected {want}"))?;
        }
    }
    Ok("12 cells".into())
}

fn analysis_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    for m in 0..100 {
        let rows = rng.random_range(1..=30);
        let cols = rng.random_range(1..=40);
        let labels = random_labels(&mut rng, cols);
        let scores: Vec<f64> = (0..rows).flat_map(|_| random_row(&mut rng, cols)).collect();
        let matrix = ScoreMatrix::new(scores, ids("q", rows), ids("t", cols), labels.clone()).unwrap();
        let profile = score_profile(&matrix).map_err(|e| e.to_string())?;
        ensure(profile.windows(2).all(|w| w[0] >= w[1]), || format!("matrix {m}: profile increases"))?;
        ensure(profile.iter().all(|&v| v >= 0.0), || format!("matrix {m}: negative profile"))?;
        ensure(profile[profile.len() - 1] == 0.0, || format!("matrix {m}: profile minimum is not 0"))?;

        let preds = classify_matrix(&matrix, PoolingMethod::Mean).unwrap();
        let mut label_set: Vec<String> = labels.clone();
        label_set.sort();
        label_set.dedup();
        label_set.push("never".into());
        let mut counts: HashMap<&str, i64> = label_set.iter().map(|l| (l.as_str(), 0)).collect();
        for p in &preds {
            *counts.get_mut(p.label.as_str()).unwrap() += 1;
        }
        // integer variance is exact
        let n = label_set.len() as i64;
        let s: i64 = counts.values().sum();
        let s2: i64 = counts.values().map(|c| c * c).sum();
        let want = ((n * s2 - s * s) as f64).sqrt() / n as f64;
        let got = prediction_count_stddev(&preds, &label_set);
        ensure((got - want).abs() < 1e-12, || format!("matrix {m}: stddev {got} vs {want}"))?;
    }
    Ok("100 matrices".into())
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let trees: Vec<_> = dirs
        .iter()
        .map(|d| {
            let cfg = RunConfig {
                dataset_path: "builtin:synthetic-4class".into(),
                shots: 2,
                query_size: 100,
                seeds: vec![4, 5],
                pivot_p: 1,
                output_dir: Some(d.path().to_path_buf()),
                ..RunConfig::default()
            };
            run_experiment(&cfg).map_err(|e| e.to_string())?;
            Ok(read_tree(d.path()))
        })
        .collect::<Result<_, String>>()?;
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.len() == b.len(), || "different file sets".into())?;
    for ((pa, ca), (pb, cb)) in a.iter().zip(b) {
        ensure(pa == pb && ca == cb, || format!("{pa} differs"))?;
    }
    let csvs = a.iter().filter(|(p, _)| p.ends_with(".csv")).count();
    ensure(a.iter().any(|(p, _)| p.ends_with("report.json")), || "no report written".into())?;
    Ok(format!("{} files identical ({csvs} CSV)", a.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Check); 13] = [
        ("pair-count identities", 5, pair_counts),
        ("pooling oracle equivalence", 10, pooling_oracle),
        ("transform invariance", 5, transform_invariance),
        ("pivot saturation", 30, pivot_saturation),
        ("representativeness invariance", 5, representativeness_invariance),
        ("gradient check", 60, gradient_check),
        ("overfit sanity", 60, overfit),
        ("end-to-end toy classification", 180, end_to_end),
        ("KNN class-size bias", 1, knn_class_size_bias),
        ("1-shot self-pairs", 1, one_shot_self_pairs),
        ("epochs table", 1, epochs_table),
        ("analysis properties", 5, analysis_properties),
        ("determinism", 120, determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let limit = Duration::from_secs(*budget);
        let verdict = match result {
            Ok(detail) if elapsed <= limit => Ok(detail),
            Ok(detail) => Err(format!("{detail}; over the {budget} s budget")),
            Err(e) => Err(e),
        };
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2} {name} ({:.2} s): {detail}", i + 1, elapsed.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
