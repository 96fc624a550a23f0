//! Relevance metric: mask-position vocabulary distribution, meta-verbalizer
//! aggregation into a same/different binomial, and the score
//! `delta = p(same) - p(different)`.
//!
//! Two scorers implement [`RelevanceScorer`]: [`LexicalOverlapScorer`], a
//! parameter-free reference, and [`TinyMlmScorer`], a small trainable
//! transformer encoder with a tied output projection.

pub mod checkpoint;
pub mod gradcheck;
mod lexical;
pub mod tiny_mlm;
pub mod train;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Episode, Sample, Tokenizer, NEGATIVE_WORDS, POSITIVE_WORDS};
use crate::pooling::ScoreMatrix;

pub use lexical::LexicalOverlapScorer;
pub use tiny_mlm::{Architecture, ScorerParams, TinyMlmScorer};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("meta-verbalizer words carry no probability mass")]
    Degenerate,
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token index {token} is outside a vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("mask position {position} is invalid for a sequence of {len} tokens")]
    MaskPosition { position: usize, len: usize },
    #[error("training pair {index} has no same-class label")]
    Unlabeled { index: usize },
    #[error("meta-verbalizer word {0:?} is not in the vocabulary")]
    MissingWord(String),
    #[error("meta-verbalizer word sets must be non-empty and disjoint")]
    InvalidVerbalizer,
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("training set is empty")]
    NoPairs,
}

/// How mask-position outputs are reduced to the same/different binomial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    /// Sum the probabilities of each word set, then renormalize.
    #[default]
    Probs,
    /// Sum the logits of each word set, then take a two-way softmax.
    Logits,
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregate::Probs => "probs",
            Aggregate::Logits => "logits",
        })
    }
}

impl std::str::FromStr for Aggregate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probs" => Ok(Aggregate::Probs),
            "logits" => Ok(Aggregate::Logits),
            other => Err(format!("unknown aggregate mode {other:?} (expected probs|logits)")),
        }
    }
}

/// Vocabulary indices of the positive and negative word sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaVerbalizer {
    positive: Vec<usize>,
    negative: Vec<usize>,
}

impl MetaVerbalizer {
    pub fn new(positive: Vec<usize>, negative: Vec<usize>) -> Result<Self, ScorerError> {
        if positive.is_empty() || negative.is_empty() || positive.iter().any(|p| negative.contains(p))
        {
            return Err(ScorerError::InvalidVerbalizer);
        }
        Ok(MetaVerbalizer { positive, negative })
    }

    /// Resolves {relevant, similar, consistent} / {irrelevant, inconsistent,
    /// different} against a vocabulary.
    pub fn resolve(tokenizer: &Tokenizer) -> Result<Self, ScorerError> {
        let ids = |words: &[&str]| {
            words
                .iter()
                .map(|w| tokenizer.id(w).ok_or_else(|| ScorerError::MissingWord(w.to_string())))
                .collect::<Result<Vec<_>, _>>()
        };
        MetaVerbalizer::new(ids(&POSITIVE_WORDS)?, ids(&NEGATIVE_WORDS)?)
    }

    pub fn positive(&self) -> &[usize] {
        &self.positive
    }

    pub fn negative(&self) -> &[usize] {
        &self.negative
    }

    /// The same verbalizer with the two word sets exchanged.
    pub fn swapped(&self) -> Self {
        MetaVerbalizer {
            positive: self.negative.clone(),
            negative: self.positive.clone(),
        }
    }
}

/// Normalized word distribution at the mask position.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabDistribution {
    probs: Vec<f64>,
}

impl VocabDistribution {
    /// Wraps probabilities that already sum to one.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        debug_assert!(probs.iter().all(|p| *p >= 0.0));
        VocabDistribution { probs }
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        VocabDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinomialRelevance {
    /// Probability of "same class".
    pub p1: f64,
    /// Probability of "different class".
    pub p0: f64,
}

impl BinomialRelevance {
    /// Binomial with `p1 = sigmoid(logit)`.
    pub fn from_logit(logit: f64) -> Self {
        let p1 = sigmoid(logit);
        BinomialRelevance { p1, p0: sigmoid(-logit) }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Aggregates word probabilities into the binomial.
pub fn meta_verbalize(
    dist: &VocabDistribution,
    mv: &MetaVerbalizer,
) -> Result<BinomialRelevance, ScorerError> {
    let mass = |ids: &[usize]| -> Result<f64, ScorerError> {
        ids.iter()
            .map(|&i| {
                dist.probs.get(i).copied().ok_or(ScorerError::TokenOutOfRange {
                    token: i,
                    vocab: dist.probs.len(),
                })
            })
            .sum()
    };
    let pos = mass(&mv.positive)?;
    let neg = mass(&mv.negative)?;
    let total = pos + neg;
    if total <= 0.0 {
        return Err(ScorerError::Degenerate);
    }
    Ok(BinomialRelevance {
        p1: pos / total,
        p0: neg / total,
    })
}

/// Aggregates raw logits: logit-sum per word set, then a two-way softmax.
pub fn meta_verbalize_logits(
    logits: &[f64],
    mv: &MetaVerbalizer,
) -> Result<BinomialRelevance, ScorerError> {
    let sum = |ids: &[usize]| -> Result<f64, ScorerError> {
        ids.iter()
            .map(|&i| {
                logits.get(i).copied().ok_or(ScorerError::TokenOutOfRange {
                    token: i,
                    vocab: logits.len(),
                })
            })
            .sum()
    };
    Ok(BinomialRelevance::from_logit(sum(&mv.positive)? - sum(&mv.negative)?))
}

pub fn delta(rel: &BinomialRelevance) -> f64 {
    rel.p1 - rel.p0
}

/// A text-pair relevance metric.
pub trait RelevanceScorer {
    /// Binomial relevance of `reference` to `query`; the query fills the first
    /// template slot.
    fn relevance(&self, query: &str, reference: &str) -> Result<BinomialRelevance, ScorerError>;

    fn score(&self, query: &str, reference: &str) -> Result<f64, ScorerError> {
        Ok(delta(&self.relevance(query, reference)?))
    }
}

impl<S: RelevanceScorer + ?Sized> RelevanceScorer for &S {
    fn relevance(&self, query: &str, reference: &str) -> Result<BinomialRelevance, ScorerError> {
        (**self).relevance(query, reference)
    }
}

impl<S: RelevanceScorer + ?Sized> RelevanceScorer for Box<S> {
    fn relevance(&self, query: &str, reference: &str) -> Result<BinomialRelevance, ScorerError> {
        (**self).relevance(query, reference)
    }
}

/// Counts scorer invocations.
pub struct CountingScorer<S> {
    inner: S,
    calls: AtomicUsize,
}

impl<S: RelevanceScorer> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        CountingScorer {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) -> usize {
        self.calls.swap(0, Ordering::Relaxed)
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: RelevanceScorer> RelevanceScorer for CountingScorer<S> {
    fn relevance(&self, query: &str, reference: &str) -> Result<BinomialRelevance, ScorerError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.relevance(query, reference)
    }
}

/// Scores every (query, reference) pair. Rows follow `queries`, columns
/// follow `references`.
pub fn score_samples<S: RelevanceScorer + ?Sized>(
    scorer: &S,
    queries: &[Sample],
    references: &[Sample],
) -> Result<ScoreMatrix, ScorerError> {
    let mut scores = Vec::with_capacity(queries.len() * references.len());
    for q in queries {
        for r in references {
            scores.push(scorer.score(&q.text, &r.text)?);
        }
    }
    Ok(ScoreMatrix::new(
        scores,
        queries.iter().map(|s| s.id.clone()).collect(),
        references.iter().map(|s| s.id.clone()).collect(),
        references.iter().map(|s| s.label.clone()).collect(),
    )
    .expect("dimensions are consistent by construction"))
}

/// Query × in-domain train score matrix of an episode.
pub fn score_matrix<S: RelevanceScorer + ?Sized>(
    scorer: &S,
    episode: &Episode,
) -> Result<ScoreMatrix, ScorerError> {
    score_samples(scorer, &episode.query, &episode.train)
}
