//! Next-token pretraining on (prompt, response) examples.
//!
//! The loss is the mean negative log-likelihood of response tokens; prompt
//! tokens are context only.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ModelError, PolicyModel, Result};
use crate::optim::{accumulate, l2_norm, Optimizer, OptimizerKind};
use crate::seed::SeedStream;
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of the final learning rate kept at the end of the linear decay.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            learning_rate: 3e-3,
            batch_size: 16,
            final_lr_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub fn pretrain(model: &mut PolicyModel, data: &[TrainingExample], cfg: &PretrainConfig) -> Result<Vec<PretrainLog>> {
    if model.is_frozen() {
        return Err(ModelError::Frozen);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ModelError::InvalidConfig("epochs and batch_size must be at least 1".into()));
    }
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let n = model.params().len();
    let mut opt = Optimizer::new(OptimizerKind::Adamw, n);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let stream = SeedStream::new(cfg.seed).derive("pretrain");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream.index(epoch as u64).rng());
        for batch in order.chunks(cfg.batch_size) {
            let examples: Vec<&TrainingExample> = batch.iter().map(|&i| &data[i]).collect();
            let ntok: usize = examples.iter().map(|e| e.response.len()).sum();
            if ntok == 0 {
                continue;
            }
            let coef = -1.0 / ntok as f64;
            let m: &PolicyModel = model;
            let (grad, lps) = accumulate(&examples, n, |e, g| -> Result<f64> {
                let st = m.trace(&e.prompt, &e.response)?;
                m.backprop(&st, coef, g)?;
                Ok(st.score.total_logprob)
            })?;
            let nll = -lps.iter().sum::<f64>();
            let progress = step as f64 / total_steps.max(1) as f64;
            let lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
            let grad_norm = l2_norm(&grad);
            opt.step(model.params_mut()?, &grad, lr);
            log.push(PretrainLog {
                step,
                epoch,
                loss: nll / ntok as f64,
                grad_norm,
            });
            step += 1;
        }
    }
    Ok(log)
}
