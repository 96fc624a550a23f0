//! Word-level tokenizer over a vocabulary built from the loaded corpora.
//!
//! Text is lowercased, stripped of every non-alphanumeric character and split
//! on whitespace. The special markers and the six meta-verbalizer words are
//! always inserted first, so their indices do not depend on the corpus.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Words aggregated into the "same class" probability.
pub const POSITIVE_WORDS: [&str; 3] = ["relevant", "similar", "consistent"];
/// Words aggregated into the "different class" probability.
pub const NEGATIVE_WORDS: [&str; 3] = ["irrelevant", "inconsistent", "different"];

/// Default per-side truncation limit.
pub const DEFAULT_MAX_TOKENS: usize = 120;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("vocabulary is missing required entry {0:?}")]
    MissingEntry(String),
    #[error("vocabulary entry {0:?} appears more than once")]
    DuplicateEntry(String),
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Builds a vocabulary from `texts`, in first-occurrence order after the
    /// reserved entries. `extra_words` (e.g. template literals) are normalized
    /// and added before the corpus words.
    pub fn build<'a, I, E>(texts: I, extra_words: E) -> Self
    where
        I: IntoIterator<Item = &'a str>,
        E: IntoIterator<Item = &'a str>,
    {
        let mut tok = Tokenizer {
            vocab: Vec::new(),
            index: HashMap::new(),
        };
        for w in reserved() {
            tok.insert(w.to_string());
        }
        for text in extra_words.into_iter().chain(texts) {
            for w in normalize(text) {
                tok.insert(w);
            }
        }
        tok
    }

    /// Rebuilds a tokenizer from a stored vocabulary, validating the reserved
    /// entries.
    pub fn from_vocab(vocab: Vec<String>) -> Result<Self, TokenizerError> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(TokenizerError::DuplicateEntry(w.clone()));
            }
        }
        for w in reserved() {
            if !index.contains_key(w) {
                return Err(TokenizerError::MissingEntry(w.to_string()));
            }
        }
        Ok(Tokenizer { vocab, index })
    }

    fn insert(&mut self, word: String) {
        if !self.index.contains_key(&word) {
            self.index.insert(word.clone(), self.vocab.len());
            self.vocab.push(word);
        }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    fn reserved_id(&self, word: &str) -> usize {
        self.index[word]
    }

    pub fn pad_id(&self) -> usize {
        self.reserved_id(PAD)
    }

    pub fn unk_id(&self) -> usize {
        self.reserved_id(UNK)
    }

    pub fn sep_id(&self) -> usize {
        self.reserved_id(SEP)
    }

    pub fn mask_id(&self) -> usize {
        self.reserved_id(MASK)
    }

    /// Maps a single normalized word, falling back to the unknown marker.
    pub fn word_id(&self, word: &str) -> usize {
        self.id(word).unwrap_or_else(|| self.unk_id())
    }

    /// Full token sequence of `text`, without truncation.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        normalize(text).iter().map(|w| self.word_id(w)).collect()
    }

    /// Token sequence of `text` cut to its first `max_tokens` tokens.
    pub fn tokenize_and_truncate(&self, text: &str, max_tokens: usize) -> Vec<usize> {
        assert!(max_tokens >= 1, "max_tokens must be at least 1");
        let mut ids = self.tokenize(text);
        ids.truncate(max_tokens);
        ids
    }
}

fn reserved() -> impl Iterator<Item = &'static str> {
    [PAD, UNK, SEP, MASK]
        .into_iter()
        .chain(POSITIVE_WORDS)
        .chain(NEGATIVE_WORDS)
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = TokenizerError;

    fn try_from(vocab: Vec<String>) -> Result<Self, Self::Error> {
        Tokenizer::from_vocab(vocab)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(tok: Tokenizer) -> Self {
        tok.vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn reserved_entries_are_distinct() {
        let tok = Tokenizer::build(["relevant news about similar things"], []);
        let mut ids: Vec<usize> = reserved().map(|w| tok.id(w).unwrap()).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert_eq!(n, 10);
    }

    #[test]
    fn normalization_lowercases_and_strips_punctuation() {
        assert_eq!(normalize("Hello, World!  It's 2024."), ["hello", "world", "its", "2024"]);
        assert_eq!(normalize("[MASK]"), ["mask"]);
        assert!(normalize("  ... ").is_empty());
    }

    #[test]
    fn truncation_keeps_leading_tokens() {
        let text = words(200);
        let tok = Tokenizer::build([text.as_str()], []);
        let full = tok.tokenize(&text);
        let cut = tok.tokenize_and_truncate(&text, DEFAULT_MAX_TOKENS);
        assert_eq!(cut.len(), 120);
        assert_eq!(cut[..], full[..120]);
    }

    #[test]
    fn empty_text_and_exact_length() {
        let text = words(120);
        let tok = Tokenizer::build([text.as_str()], []);
        assert!(tok.tokenize_and_truncate("", 120).is_empty());
        assert_eq!(tok.tokenize_and_truncate(&text, 120), tok.tokenize(&text));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tok = Tokenizer::build(["alpha beta"], []);
        assert_eq!(tok.tokenize("alpha gamma"), vec![tok.id("alpha").unwrap(), tok.unk_id()]);
    }

    #[test]
    fn vocab_round_trip_validates() {
        let tok = Tokenizer::build(["a b c"], ["topic"]);
        let back = Tokenizer::from_vocab(tok.vocab().to_vec()).unwrap();
        assert_eq!(back, tok);
        let err = Tokenizer::from_vocab(vec!["x".into()]).unwrap_err();
        assert!(matches!(err, TokenizerError::MissingEntry(_)));
        let mut dup = tok.vocab().to_vec();
        dup.push("a".into());
        assert_eq!(Tokenizer::from_vocab(dup).unwrap_err(), TokenizerError::DuplicateEntry("a".into()));
    }

    proptest! {
        #[test]
        fn truncation_is_prefix(text in "[a-e ,.]{0,80}", max in 1usize..30) {
            let tok = Tokenizer::build([text.as_str()], []);
            let full = tok.tokenize(&text);
            let cut = tok.tokenize_and_truncate(&text, max);
            prop_assert!(cut.len() <= max);
            prop_assert_eq!(&full[..cut.len()], &cut[..]);
            prop_assert_eq!(tok.tokenize(&text), full);
        }
    }
}
