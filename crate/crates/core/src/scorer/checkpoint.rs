//! Self-describing JSON checkpoint of a trained [`TinyMlmScorer`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Aggregate, Architecture, ScorerParams, TinyMlmScorer};
use crate::corpus::Tokenizer;
use crate::prompting::PromptTemplate;

pub const FORMAT: &str = "metricprompt-checkpoint/1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub architecture: Architecture,
    pub template: String,
    pub max_tokens: usize,
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub vocab: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_scorer(scorer: &TinyMlmScorer, provenance: Option<Provenance>) -> Self {
        let params = scorer.params();
        Checkpoint {
            format: FORMAT.to_string(),
            architecture: *params.architecture(),
            template: scorer.template().pattern().to_string(),
            max_tokens: scorer.template().max_tokens(),
            aggregate: scorer.objective().aggregate,
            provenance,
            vocab: scorer.tokenizer().vocab().to_vec(),
            tensors: params
                .tensors()
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: params.data()[t.range()].to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_scorer(self) -> Result<TinyMlmScorer, CheckpointError> {
        if self.format != FORMAT {
            return Err(CheckpointError::Invalid(format!(
                "unsupported format {:?}",
                self.format
            )));
        }
        let tokenizer = Tokenizer::from_vocab(self.vocab).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        let template = PromptTemplate::parse(&self.template, self.max_tokens)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        let params = ScorerParams::from_tensors(
            self.architecture,
            self.tensors
                .into_iter()
                .map(|t| (t.name, t.shape, t.data))
                .collect(),
        )
        .map_err(CheckpointError::Invalid)?;
        TinyMlmScorer::new(params, tokenizer, template, self.aggregate)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
