use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::corpus::DEFAULT_MAX_TOKENS;
use crate::pooling::PoolingMethod;
use crate::prompting::{PromptTemplate, DEFAULT_TEMPLATE};
use crate::scorer::train::{LrSchedule, TrainingConfig};
use crate::scorer::{Aggregate, Architecture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    Lexical,
    #[default]
    TinyMlm,
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScorerKind::Lexical => "lexical",
            ScorerKind::TinyMlm => "tiny-mlm",
        })
    }
}

impl std::str::FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lexical" => Ok(ScorerKind::Lexical),
            "tiny-mlm" => Ok(ScorerKind::TinyMlm),
            other => Err(format!("unknown scorer {other:?} (expected lexical|tiny-mlm)")),
        }
    }
}

/// One experiment as a flat JSON document. Missing keys take defaults.
///
/// `dataset_path` may name a bundled corpus as `builtin:synthetic-4class` or
/// `builtin:synthetic-2class`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_path: String,
    pub dataset_name: Option<String>,
    pub shots: usize,
    pub query_size: usize,
    pub seeds: Vec<u64>,
    pub template: String,
    pub max_tokens: usize,
    pub scorer: ScorerKind,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub max_grad_norm: Option<f64>,
    pub token_dropout: f64,
    /// Overrides the epoch table.
    pub epochs: Option<usize>,
    pub aggregate: Aggregate,
    pub pooling: PoolingMethod,
    pub knn_k: Option<usize>,
    pub noise: usize,
    pub ood_dataset_path: Option<String>,
    pub ood_dataset_name: Option<String>,
    pub ood_shots: usize,
    /// Pivots per label; 0 disables pivot inference.
    pub pivot_p: usize,
    pub exclude_self: bool,
    /// Not part of the config hash.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = TrainingConfig::toy(1, 0);
        RunConfig {
            dataset_path: String::new(),
            dataset_name: None,
            shots: 4,
            query_size: 200,
            seeds: vec![1],
            template: DEFAULT_TEMPLATE.to_string(),
            max_tokens: DEFAULT_MAX_TOKENS,
            scorer: ScorerKind::TinyMlm,
            width: 64,
            blocks: 2,
            heads: 2,
            ff_width: 128,
            learning_rate: toy.learning_rate,
            batch_size: toy.batch_size,
            weight_decay: toy.weight_decay,
            lr_schedule: toy.schedule,
            max_grad_norm: toy.max_grad_norm,
            token_dropout: toy.token_dropout,
            epochs: None,
            aggregate: Aggregate::Probs,
            pooling: PoolingMethod::Mean,
            knn_k: None,
            noise: 0,
            ood_dataset_path: None,
            ood_dataset_name: None,
            ood_shots: 0,
            pivot_p: 0,
            exclude_self: false,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.dataset_path.is_empty() {
            return bad("dataset_path is required".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.shots == 0 {
            return bad("shots must be at least 1".into());
        }
        if self.query_size == 0 {
            return bad("query_size must be at least 1".into());
        }
        self.prompt_template()?;
        if self.epochs == Some(0) {
            return bad("epochs must be at least 1".into());
        }
        if self.scorer == ScorerKind::TinyMlm {
            self.architecture(1, 1).validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
            self.training(1, 0).validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        match (self.pooling, self.knn_k) {
            (_, Some(0)) => return bad("knn_k must be at least 1".into()),
            (PoolingMethod::Knn { k: Some(a) }, Some(b)) if a != b => {
                return bad(format!("pooling {} conflicts with knn_k {b}", self.pooling))
            }
            (PoolingMethod::Mean | PoolingMethod::Max, Some(_)) => {
                return bad(format!("knn_k is set but pooling is {}", self.pooling))
            }
            _ => {}
        }
        if self.ood_shots > 0 && self.ood_dataset_path.is_none() {
            return bad("ood_shots is set without ood_dataset_path".into());
        }
        if self.ood_dataset_path.is_some() && self.ood_shots == 0 {
            return bad("ood_dataset_path is set but ood_shots is 0".into());
        }
        Ok(())
    }

    pub fn prompt_template(&self) -> Result<PromptTemplate, ExperimentError> {
        PromptTemplate::parse(&self.template, self.max_tokens).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// The pooling method with `knn_k` folded in.
    pub fn pooling_method(&self) -> PoolingMethod {
        match (self.pooling, self.knn_k) {
            (PoolingMethod::Knn { .. }, Some(k)) => PoolingMethod::Knn { k: Some(k) },
            (m, _) => m,
        }
    }

    pub fn architecture(&self, vocab_size: usize, max_len: usize) -> Architecture {
        Architecture {
            vocab_size,
            width: self.width,
            blocks: self.blocks,
            heads: self.heads,
            ff_width: self.ff_width,
            max_len,
        }
    }

    pub fn training(&self, epochs: usize, seed: u64) -> TrainingConfig {
        TrainingConfig {
            epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            schedule: self.lr_schedule,
            max_grad_norm: self.max_grad_norm,
            token_dropout: self.token_dropout,
            ..TrainingConfig::toy(epochs, seed)
        }
    }

    /// Hex SHA-256 prefix of the canonical JSON form, `output_dir` excluded.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            output_dir: None,
            ..self.clone()
        };
        let digest = Sha256::digest(serde_json::to_string(&canonical).expect("config serializes").as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Episode = 1,
    Noise = 2,
    Ood = 3,
    Init = 4,
    Shuffle = 5,
}

pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}
