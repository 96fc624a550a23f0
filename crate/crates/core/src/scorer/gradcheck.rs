//! Central-difference verification of the analytic gradient.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tiny_mlm::Objective;
use super::train::{loss_and_gradient, pair_loss};
use super::{ScorerError, ScorerParams};
use crate::prompting::PromptedPair;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Differences at or below this are accepted without a relative test.
    pub abs_tolerance: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            abs_tolerance: 1e-8,
            per_tensor: Some(48),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    /// Largest analytic gradient magnitude among the checked coordinates.
    pub max_abs_gradient: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub tensors: Vec<TensorCheck>,
}

/// Compares the analytic gradient of the mean batch loss with central
/// differences.
///
/// A coordinate contributes `|a - n| / max(|a|, |n|)` unless `|a - n|` is
/// within the absolute tolerance.
pub fn grad_check(
    params: &ScorerParams,
    batch: &[PromptedPair],
    objective: &Objective,
    config: &GradCheckConfig,
) -> Result<GradCheckReport, ScorerError> {
    let (_, analytic) = loss_and_gradient(params, batch, objective)?;
    let mut probe = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = Vec::new();
    let h = config.step;
    for spec in params.tensors() {
        let coords: Vec<usize> = match config.per_tensor {
            Some(n) if n < spec.len() => {
                let mut c = index::sample(&mut rng, spec.len(), n).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..spec.len()).collect(),
        };
        let mut worst: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        let mut largest: f64 = 0.0;
        for &c in &coords {
            let i = spec.offset + c;
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = pair_loss(&probe, batch, objective)?;
            probe.data_mut()[i] = orig - h;
            let down = pair_loss(&probe, batch, objective)?;
            probe.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let diff = (analytic[i] - numeric).abs();
            worst_abs = worst_abs.max(diff);
            largest = largest.max(analytic[i].abs());
            if diff > config.abs_tolerance {
                worst = worst.max(diff / analytic[i].abs().max(numeric.abs()));
            }
        }
        tensors.push(TensorCheck {
            name: spec.name.clone(),
            checked: coords.len(),
            max_relative_error: worst,
            max_abs_error: worst_abs,
            max_abs_gradient: largest,
        });
    }
    Ok(GradCheckReport {
        max_relative_error: tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max),
        max_abs_error: tensors.iter().map(|t| t.max_abs_error).fold(0.0, f64::max),
        checked: tensors.iter().map(|t| t.checked).sum(),
        tensors,
    })
}
