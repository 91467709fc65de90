//! Minimal trainer for the synthetic tasks.
//!
//! Training runs in `f32`; the same code runs in `f64` for gradient checks.

mod adam;
mod backprop;
mod tasks;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use backprop::{batch_eval, batch_logits, batch_loss, loss_and_grad, zero_grad, Batch};
pub use tasks::{kv_batch, kv_sequence, lm_batch, procedural_corpus, KvVocab, TaskSpec, BOS, QUERY};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Weights};
use crate::tokenizer::CharTokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Stop early once held-out accuracy (lookup) reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_steps: 6000,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_steps: 100,
            clip_norm: 1.0,
            eval_every: 100,
            eval_batches: 8,
            target_accuracy: Some(0.99),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights: Weights,
    pub steps: usize,
    pub final_train_loss: f64,
    pub validation_loss: f64,
    /// Held-out answer accuracy for the lookup task; next-character accuracy
    /// for language modelling.
    pub validation_accuracy: f64,
    /// Accuracy or loss a model without any learning would reach.
    pub chance: f64,
}

/// Trains a fresh model with default options. Deterministic given `seed`.
pub fn train_toy(config: &ModelConfig, task: &TaskSpec, seed: u64) -> Result<Weights> {
    Ok(train_toy_with(config, task, &TrainOptions::default(), seed)?.weights)
}

enum Data {
    Kv(KvVocab),
    Lm { train: Vec<u32>, valid: Vec<u32> },
}

impl Data {
    /// Training batches score every position, lookup sequences included: the
    /// answer positions alone are too sparse a signal for recall to emerge.
    fn batch(&self, n: usize, len: usize, rng: &mut impl Rng) -> Result<Batch> {
        match self {
            Data::Kv(v) => {
                let mut b = kv_batch(v, n, len, rng);
                b.mask.iter_mut().for_each(|m| m.fill(true));
                Ok(b)
            }
            Data::Lm { train, .. } => lm_batch(train, n, len, rng),
        }
    }

    fn valid_batch(&self, n: usize, len: usize, rng: &mut impl Rng) -> Result<Batch> {
        match self {
            Data::Kv(v) => Ok(kv_batch(v, n, len, rng)),
            Data::Lm { valid, .. } => lm_batch(valid, n, len, rng),
        }
    }
}

pub fn train_toy_with(config: &ModelConfig, task: &TaskSpec, opts: &TrainOptions, seed: u64) -> Result<TrainReport> {
    config.validate()?;
    if opts.batch_size == 0 || opts.eval_every == 0 || opts.eval_batches == 0 {
        return Err(Error::Config("batch_size, eval_every and eval_batches must be >= 1".into()));
    }
    if task.vocab_size() != config.vocab_size {
        return Err(Error::Config(format!(
            "task vocabulary has {} tokens, model config has {}",
            task.vocab_size(),
            config.vocab_size
        )));
    }
    let (data, chance) = match task {
        TaskSpec::KvLookup { n_keys, n_values } => {
            let v = KvVocab::new(*n_keys, *n_values);
            v.validate()?;
            (Data::Kv(v), 1.0 / *n_values as f64)
        }
        TaskSpec::CharLm { corpus } => {
            let tok = CharTokenizer::from_corpus(corpus);
            let ids = tok.encode(corpus)?;
            let cut = ids.len() * 9 / 10;
            if cut <= config.max_train_len || ids.len() - cut <= config.max_train_len {
                return Err(Error::Config("corpus too short for a train/validation split".into()));
            }
            (Data::Lm { train: ids[..cut].to_vec(), valid: ids[cut..].to_vec() }, (tok.vocab_size() as f64).ln())
        }
    };
    let seq_len = config.max_train_len;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut valid_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f7_a11d);
    let valid: Vec<Batch> = (0..opts.eval_batches)
        .map(|_| data.valid_batch(opts.batch_size, seq_len, &mut valid_rng))
        .collect::<Result<_>>()?;
    let evaluate = |w: &Weights| -> Result<(f64, f64)> {
        let (mut loss, mut correct, mut total) = (0.0, 0, 0);
        for b in &valid {
            let (l, c) = batch_eval(w, b)?;
            loss += l as f64;
            correct += c;
            total += b.n_scored();
        }
        Ok((loss / valid.len() as f64, correct as f64 / total as f64))
    };

    let mut weights = Weights::<f32>::init(config, &mut rng)?;
    let mut adam = Adam::new(&weights, opts.clip_norm);
    let mut smoothed = f64::NAN;
    let mut last = (f64::INFINITY, 0.0);
    let mut steps = 0;
    for step in 0..opts.max_steps {
        let batch = data.batch(opts.batch_size, seq_len, &mut rng)?;
        let (loss, grad) = loss_and_grad(&weights, &batch)?;
        let lr = schedule(opts, step);
        let gnorm = adam.step(&mut weights, &grad, lr);
        if !weights.is_finite() {
            return Err(Error::TrainingFailed(format!("parameters diverged at step {step} (grad norm {gnorm:.3e})")));
        }
        let loss = loss as f64;
        smoothed = if smoothed.is_nan() { loss } else { 0.95 * smoothed + 0.05 * loss };
        steps = step + 1;
        if steps % opts.eval_every == 0 || steps == opts.max_steps {
            last = evaluate(&weights)?;
            info!("step {steps:5} lr {lr:.2e} train {smoothed:.4} valid {:.4} acc {:.3}", last.0, last.1);
            if matches!(data, Data::Kv(_)) && opts.target_accuracy.is_some_and(|t| last.1 >= t) {
                break;
            }
        }
    }

    let beats_chance = match data {
        Data::Kv(_) => last.1 > chance,
        Data::Lm { .. } => last.0 < chance,
    };
    if !beats_chance {
        return Err(Error::TrainingFailed(format!(
            "after {steps} steps: validation loss {:.4}, accuracy {:.4}, chance level {chance:.4}",
            last.0, last.1
        )));
    }
    Ok(TrainReport {
        weights,
        steps,
        final_train_loss: smoothed,
        validation_loss: last.0,
        validation_accuracy: last.1,
        chance,
    })
}

/// Linear warm-up followed by cosine decay to a tenth of the peak rate.
fn schedule(opts: &TrainOptions, step: usize) -> f64 {
    let peak = opts.learning_rate;
    if step < opts.warmup_steps {
        return peak * (step + 1) as f64 / opts.warmup_steps as f64;
    }
    let span = opts.max_steps.saturating_sub(opts.warmup_steps).max(1) as f64;
    let progress = ((step - opts.warmup_steps) as f64 / span).min(1.0);
    peak * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests;
