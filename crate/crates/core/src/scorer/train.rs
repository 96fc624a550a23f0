//! Mini-batch AdamW training of the tiny scorer on prompted training pairs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tiny_mlm::{loss_and_grad, loss_and_grad_dropped, Objective};
use super::{ScorerError, ScorerParams};
use crate::prompting::PromptedPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip.
    pub max_grad_norm: Option<f64>,
    /// Probability of zeroing a token embedding (never the mask) in a
    /// training pass.
    pub token_dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the base rate to zero over all steps.
    #[default]
    Linear,
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Linear => "linear",
        })
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear" => Ok(LrSchedule::Linear),
            other => Err(format!("unknown learning-rate schedule {other:?} (expected constant|linear)")),
        }
    }
}

impl TrainingConfig {
    /// Settings that converge for the toy scorer in seconds.
    pub fn toy(epochs: usize, seed: u64) -> Self {
        TrainingConfig {
            epochs,
            learning_rate: 5e-4,
            batch_size: 4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed,
            schedule: LrSchedule::Linear,
            max_grad_norm: Some(1.0),
            token_dropout: 0.1,
        }
    }

    /// Learning rate 1e-5, batch size 16, as used for fine-tuning BERT-base.
    pub fn bert_base(epochs: usize, seed: u64) -> Self {
        TrainingConfig {
            learning_rate: 1e-5,
            batch_size: 16,
            ..Self::toy(epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        let bad = |m: &str| Err(ScorerError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive and finite");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.token_dropout) {
            return bad("token dropout must lie in [0, 1)");
        }
        if self.max_grad_norm.is_some_and(|n| !(n.is_finite() && n > 0.0)) {
            return bad("gradient clip norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ScorerParams,
    /// Mean loss over all training pairs after each epoch, without token
    /// dropout.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

fn label_of(pair: &PromptedPair, index: usize) -> Result<u8, ScorerError> {
    pair.y.ok_or(ScorerError::Unlabeled { index })
}

/// Mean binary cross-entropy over `pairs`.
pub fn pair_loss(
    params: &ScorerParams,
    pairs: &[PromptedPair],
    objective: &Objective,
) -> Result<f64, ScorerError> {
    if pairs.is_empty() {
        return Err(ScorerError::NoPairs);
    }
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        total += loss_and_grad(params, &p.tokens, p.mask_position, label_of(p, i)?, objective, None)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean loss over `pairs` and its gradient.
pub fn loss_and_gradient(
    params: &ScorerParams,
    pairs: &[PromptedPair],
    objective: &Objective,
) -> Result<(f64, Vec<f64>), ScorerError> {
    if pairs.is_empty() {
        return Err(ScorerError::NoPairs);
    }
    let mut grad = vec![0.0; params.num_params()];
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let y = label_of(p, i)?;
        total += loss_and_grad(params, &p.tokens, p.mask_position, y, objective, Some((&mut grad, scale)))?;
    }
    Ok((total * scale, grad))
}

/// Fraction of pairs whose relevance falls on the side of 0.5 given by the
/// pair label.
pub fn pair_accuracy(
    params: &ScorerParams,
    pairs: &[PromptedPair],
    objective: &Objective,
) -> Result<f64, ScorerError> {
    if pairs.is_empty() {
        return Err(ScorerError::NoPairs);
    }
    let mut correct = 0usize;
    for (i, p) in pairs.iter().enumerate() {
        let y = label_of(p, i)?;
        // the positive-label loss is below ln 2 exactly when p1 > 0.5
        let l = loss_and_grad(params, &p.tokens, p.mask_position, 1, objective, None)?;
        if (l < std::f64::consts::LN_2) == (y == 1) {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    decay_mask: Vec<bool>,
    t: i32,
}

impl AdamW {
    fn new(params: &ScorerParams) -> Self {
        let mut decay_mask = vec![false; params.num_params()];
        for spec in params.tensors() {
            if spec.decay {
                decay_mask[spec.range()].fill(true);
            }
        }
        AdamW {
            m: vec![0.0; params.num_params()],
            v: vec![0.0; params.num_params()],
            decay_mask,
            t: 0,
        }
    }

    fn step(&mut self, data: &mut [f64], grad: &[f64], c: &TrainingConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..data.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.epsilon);
            if self.decay_mask[i] {
                data[i] -= lr * c.weight_decay * data[i];
            }
            data[i] -= lr * update;
        }
    }
}

/// Trains on `pairs` for `config.epochs` epochs, reshuffling each epoch.
/// Every epoch takes at least one step; the last batch may be short.
pub fn train(
    mut params: ScorerParams,
    pairs: &[PromptedPair],
    config: &TrainingConfig,
    objective: &Objective,
) -> Result<TrainOutcome, ScorerError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(ScorerError::NoPairs);
    }
    for (i, p) in pairs.iter().enumerate() {
        label_of(p, i)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(&params);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    let mut grad = vec![0.0; params.num_params()];
    let total_steps = config.epochs * pairs.len().div_ceil(config.batch_size);
    let mut dropped = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let p = &pairs[i];
                let y = p.y.expect("checked above");
                dropped.clear();
                if config.token_dropout > 0.0 {
                    dropped.extend((0..p.tokens.len()).map(|t| t != p.mask_position && rng.random_bool(config.token_dropout)));
                }
                loss_and_grad_dropped(
                    &params,
                    &p.tokens,
                    p.mask_position,
                    &dropped,
                    y,
                    objective,
                    Some((&mut grad, scale)),
                )?;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(ScorerError::NonFinite {
                    what: "gradient",
                    epoch,
                    step: steps,
                });
            }
            if let Some(max) = config.max_grad_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    let f = max / norm;
                    grad.iter_mut().for_each(|g| *g *= f);
                }
            }
            let lr = match config.schedule {
                LrSchedule::Constant => config.learning_rate,
                LrSchedule::Linear => config.learning_rate * (1.0 - steps as f64 / total_steps as f64),
            };
            opt.step(params.data_mut(), &grad, config, lr);
            steps += 1;
            if !params.all_finite() {
                return Err(ScorerError::NonFinite {
                    what: "parameters",
                    epoch,
                    step: steps,
                });
            }
        }
        let mean = pair_loss(&params, pairs, objective)?;
        if !mean.is_finite() {
            return Err(ScorerError::NonFinite {
                what: "loss",
                epoch,
                step: steps,
            });
        }
        loss_trace.push(mean);
    }
    Ok(TrainOutcome {
        params,
        loss_trace,
        steps,
    })
}
