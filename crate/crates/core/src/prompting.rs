//! Two-text prompt template and pair enumeration.
//!
//! A training pair is rendered for every ordered pair of the training pool
//! (in-domain plus out-of-domain samples, diagonal included). A query pair is
//! rendered for every (query, in-domain training sample), with the query in
//! the first text slot.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize, Episode, Sample, Tokenizer, DEFAULT_MAX_TOKENS};

pub const DEFAULT_TEMPLATE: &str = "{a} [SEP] A news of [MASK] topic: {b}";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {pattern:?} must contain exactly one {placeholder}, found {found}")]
    Placeholder {
        pattern: String,
        placeholder: &'static str,
        found: usize,
    },
    #[error("per-side token limit must be at least 1")]
    ZeroLimit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(Vec<String>),
    TextA,
    TextB,
    Mask,
    Sep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pattern: String,
    segments: Vec<Segment>,
    max_tokens: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_TEMPLATE, DEFAULT_MAX_TOKENS).unwrap()
    }
}

impl PromptTemplate {
    /// Parses a pattern with the placeholders `{a}`, `{b}`, `[MASK]` and
    /// `[SEP]`. Literal text is normalized like sample text.
    pub fn parse(pattern: &str, max_tokens: usize) -> Result<Self, TemplateError> {
        if max_tokens == 0 {
            return Err(TemplateError::ZeroLimit);
        }
        const MARKERS: [(&str, Segment); 4] = [
            ("{a}", Segment::TextA),
            ("{b}", Segment::TextB),
            ("[MASK]", Segment::Mask),
            ("[SEP]", Segment::Sep),
        ];
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut rest = pattern;
        'scan: while let Some(c) = rest.chars().next() {
            for (marker, seg) in &MARKERS {
                if let Some(tail) = rest.strip_prefix(marker) {
                    flush_literal(&mut literal, &mut segments);
                    segments.push(seg.clone());
                    rest = tail;
                    continue 'scan;
                }
            }
            literal.push(c);
            rest = &rest[c.len_utf8()..];
        }
        flush_literal(&mut literal, &mut segments);

        for (name, want) in [
            ("{a}", Segment::TextA),
            ("{b}", Segment::TextB),
            ("[MASK]", Segment::Mask),
        ] {
            let found = segments.iter().filter(|s| **s == want).count();
            if found != 1 {
                return Err(TemplateError::Placeholder {
                    pattern: pattern.to_string(),
                    placeholder: name,
                    found,
                });
            }
        }
        Ok(PromptTemplate {
            pattern: pattern.to_string(),
            segments,
            max_tokens,
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    /// Literal words of the template, to be included in a vocabulary.
    pub fn literal_words(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().flat_map(|s| match s {
            Segment::Literal(words) => words.as_slice(),
            _ => &[],
        })
        .map(String::as_str)
    }

    /// Number of tokens the template contributes besides the two texts.
    pub fn literal_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Literal(w) => w.len(),
                Segment::Mask | Segment::Sep => 1,
                Segment::TextA | Segment::TextB => 0,
            })
            .sum()
    }

    /// Longest sequence this template can render.
    pub fn max_sequence_len(&self) -> usize {
        2 * self.max_tokens + self.literal_len()
    }

    pub fn tokenize_side(&self, tokenizer: &Tokenizer, text: &str) -> Vec<usize> {
        tokenizer.tokenize_and_truncate(text, self.max_tokens)
    }
}

fn flush_literal(literal: &mut String, segments: &mut Vec<Segment>) {
    let words = normalize(literal);
    if !words.is_empty() {
        segments.push(Segment::Literal(words));
    }
    literal.clear();
}

/// A rendered token sequence with the position of its mask token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub tokens: Vec<usize>,
    pub mask_position: usize,
}

/// Substitutes two already-truncated token sequences into the template.
pub fn render_pair(
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    a_tokens: &[usize],
    b_tokens: &[usize],
) -> Rendered {
    let mut tokens = Vec::with_capacity(a_tokens.len() + b_tokens.len() + template.literal_len());
    let mut mask_position = 0;
    for seg in &template.segments {
        match seg {
            Segment::Literal(words) => tokens.extend(words.iter().map(|w| tokenizer.word_id(w))),
            Segment::TextA => tokens.extend_from_slice(a_tokens),
            Segment::TextB => tokens.extend_from_slice(b_tokens),
            Segment::Sep => tokens.push(tokenizer.sep_id()),
            Segment::Mask => {
                mask_position = tokens.len();
                tokens.push(tokenizer.mask_id());
            }
        }
    }
    Rendered {
        tokens,
        mask_position,
    }
}

/// Identifies a sample across datasets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub dataset: String,
    pub id: String,
}

impl From<&Sample> for SampleKey {
    fn from(s: &Sample) -> Self {
        SampleKey {
            dataset: s.dataset_tag.clone(),
            id: s.id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptedPair {
    pub tokens: Vec<usize>,
    pub mask_position: usize,
    /// Same-class label; set on training pairs only.
    pub y: Option<u8>,
    pub left: SampleKey,
    pub right: SampleKey,
}

/// 1 iff both samples carry the same label within the same dataset.
pub fn pair_label(a: &Sample, b: &Sample) -> u8 {
    u8::from(a.dataset_tag == b.dataset_tag && a.label == b.label)
}

fn pairs_over(
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    left: &[&Sample],
    right: &[&Sample],
    labeled: bool,
) -> Vec<PromptedPair> {
    let tokenize = |s: &Sample| template.tokenize_side(tokenizer, &s.text);
    let left_tokens: Vec<Vec<usize>> = left.iter().map(|s| tokenize(s)).collect();
    let right_tokens: Vec<Vec<usize>> = right.iter().map(|s| tokenize(s)).collect();
    let mut out = Vec::with_capacity(left.len() * right.len());
    for (a, a_tok) in left.iter().zip(&left_tokens) {
        for (b, b_tok) in right.iter().zip(&right_tokens) {
            let r = render_pair(template, tokenizer, a_tok, b_tok);
            out.push(PromptedPair {
                tokens: r.tokens,
                mask_position: r.mask_position,
                y: labeled.then(|| pair_label(a, b)),
                left: SampleKey::from(*a),
                right: SampleKey::from(*b),
            });
        }
    }
    out
}

/// Every ordered pair of `train ++ ood_train`, row-major.
pub fn build_training_pairs(
    episode: &Episode,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
) -> Vec<PromptedPair> {
    let pool: Vec<&Sample> = episode.train.iter().chain(&episode.ood_train).collect();
    pairs_over(template, tokenizer, &pool, &pool, true)
}

/// Every (query, in-domain train) pair, query-major.
pub fn build_query_pairs(
    episode: &Episode,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
) -> Vec<PromptedPair> {
    let query: Vec<&Sample> = episode.query.iter().collect();
    let train: Vec<&Sample> = episode.train.iter().collect();
    pairs_over(template, tokenizer, &query, &train, false)
}
