//! Perplexity as a function of input length.
//!
//! For an input of `ℓ` tokens only the last `m = min(N, ℓ - 1)` predictions
//! are scored, where `N` is the training length. The methods differ in what
//! the model sees before those predictions:
//!
//! - `naive`: the whole input in one context (reported as n/a beyond the
//!   comprehensible window);
//! - `naive_interpolated`: the same with positions compressed by `alpha`;
//! - `truncate`: only the `m` tokens preceding each scored target;
//! - `extended`: like `truncate`, with everything earlier cached as memories.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::retrieval::neg_log_prob;
use crate::error::{Error, Result};
use crate::memory::RetrievalConfig;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerplexityMethod {
    Naive,
    NaiveInterpolated { alpha: f32 },
    Truncate,
    Extended,
}

impl fmt::Display for PerplexityMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerplexityMethod::Naive => f.write_str("naive"),
            PerplexityMethod::NaiveInterpolated { alpha } => write!(f, "naive_interpolated(alpha={alpha})"),
            PerplexityMethod::Truncate => f.write_str("truncate"),
            PerplexityMethod::Extended => f.write_str("extended"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRow {
    pub input_length: usize,
    /// `None` where the method cannot take inputs this long.
    pub perplexity: Option<f64>,
    pub mean_nll: Option<f64>,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub method: String,
    /// Retrieval budget for the extended method.
    pub k: Option<usize>,
    pub rows: Vec<PerplexityRow>,
}

impl PerplexityReport {
    pub fn table(&self) -> String {
        let name = match self.k {
            Some(k) => format!("{} (k={k})", self.method),
            None => self.method.clone(),
        };
        let mut s = String::from("method\tinput_length\tperplexity\n");
        for r in &self.rows {
            let p = r.perplexity.map_or_else(|| "n/a".to_string(), |p| format!("{p:.4}"));
            s += &format!("{name}\t{}\t{p}\n", r.input_length);
        }
        s
    }
}

/// Slides windows of each input length over `corpus` with step `eval_stride`
/// and reports `exp(mean NLL)` over the scored predictions.
pub fn perplexity_eval(
    model: &Model,
    corpus: &[u32],
    method: PerplexityMethod,
    input_lengths: &[usize],
    eval_stride: usize,
    retr: &RetrievalConfig,
) -> Result<PerplexityReport> {
    if eval_stride == 0 {
        return Err(Error::Config("eval_stride must be >= 1".into()));
    }
    if input_lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("input lengths must be sorted ascending".into()));
    }
    let n = model.config().max_train_len;
    let window = model.config().comprehensible_window();
    let scaled;
    let runner = match method {
        PerplexityMethod::NaiveInterpolated { alpha } => {
            scaled = model.with_position_interpolation(alpha)?;
            &scaled
        }
        _ => model,
    };
    let mut rows = Vec::with_capacity(input_lengths.len());
    for &len in input_lengths {
        if len < 2 {
            return Err(Error::Config(format!("input length {len} leaves nothing to score")));
        }
        if len > corpus.len() {
            return Err(Error::Config(format!("input length {len} exceeds the corpus of {} tokens", corpus.len())));
        }
        let limit = match method {
            PerplexityMethod::Naive => Some(window),
            PerplexityMethod::NaiveInterpolated { alpha } => Some((window as f32 * alpha).floor() as usize),
            _ => None,
        };
        if limit.is_some_and(|l| len > l) {
            rows.push(PerplexityRow { input_length: len, perplexity: None, mean_nll: None, n_windows: 0 });
            continue;
        }
        let starts: Vec<usize> = (0..=corpus.len() - len).step_by(eval_stride).collect();
        let m = n.min(len - 1);
        let per_window: Vec<f64> = starts
            .par_iter()
            .map(|&start| {
                let input = &corpus[start..start + len];
                let targets = &input[len - m..];
                let (context, bank) = match method {
                    PerplexityMethod::Naive | PerplexityMethod::NaiveInterpolated { .. } => (&input[..len - 1], None),
                    PerplexityMethod::Truncate => (&input[len - 1 - m..len - 1], None),
                    PerplexityMethod::Extended => {
                        let prefix = &input[..len - 1 - m];
                        let bank = if prefix.is_empty() { None } else { Some(model.build_bank(prefix, retr)?) };
                        (&input[len - 1 - m..len - 1], bank)
                    }
                };
                let logits = runner.forward(context, bank.as_ref(), retr, None)?.logits;
                let offset = context.len() - m;
                Ok(targets
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| neg_log_prob(logits.row(offset + j).as_slice().expect("contiguous logits"), t))
                    .sum::<f64>())
            })
            .collect::<Result<_>>()?;
        let mean = per_window.iter().sum::<f64>() / (per_window.len() * m) as f64;
        rows.push(PerplexityRow {
            input_length: len,
            perplexity: Some(mean.exp()),
            mean_nll: Some(mean),
            n_windows: per_window.len(),
        });
    }
    Ok(PerplexityReport {
        method: method.to_string(),
        k: matches!(method, PerplexityMethod::Extended).then_some(retr.k),
        rows,
    })
}
