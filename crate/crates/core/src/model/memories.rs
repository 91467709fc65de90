//! Strided construction of memory banks.
//!
//! A document of `D` tokens is read in `n + 1` windows of at most `L` tokens,
//! where `n` is the smallest integer with `s * n + L >= D`. Window `j` starts
//! at `s * j`. The first window caches all of its tokens; every later window
//! caches only the tokens no earlier window has produced (its last `s`), so
//! each of those sees at least `L - s` tokens of preceding context.

use std::ops::Range;

use ndarray::{s, ArrayView3};
use rayon::prelude::*;

use super::forward::{LayerKv, Model};
use crate::error::{Error, Result};
use crate::memory::{MemoryBank, RetrievalConfig, RotationState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheWindow {
    /// Tokens fed through the model.
    pub input: (usize, usize),
    /// Tokens whose keys/values are kept (a suffix of `input`).
    pub cached: (usize, usize),
}

impl CacheWindow {
    pub fn input_range(&self) -> Range<usize> {
        self.input.0..self.input.1
    }

    pub fn cached_range(&self) -> Range<usize> {
        self.cached.0..self.cached.1
    }
}

/// Number of windows beyond the first: smallest `n` with `s * n + L >= D`.
pub fn extra_windows(doc_len: usize, stride: usize, window: usize) -> usize {
    if doc_len <= window {
        0
    } else {
        (doc_len - window).div_ceil(stride)
    }
}

pub fn window_plan(doc_len: usize, stride: usize, window: usize) -> Result<Vec<CacheWindow>> {
    if stride == 0 || window == 0 {
        return Err(Error::Config("stride and window must be >= 1".into()));
    }
    if stride > window {
        return Err(Error::Config(format!("stride {stride} exceeds the input window {window}")));
    }
    if doc_len == 0 {
        return Ok(Vec::new());
    }
    let n = extra_windows(doc_len, stride, window);
    let mut plan = Vec::with_capacity(n + 1);
    let mut cached_to = 0;
    for j in 0..=n {
        let begin = stride * j;
        let end = (begin + window).min(doc_len);
        plan.push(CacheWindow { input: (begin, end), cached: (cached_to, end) });
        cached_to = end;
    }
    debug_assert_eq!(cached_to, doc_len);
    Ok(plan)
}

impl Model {
    /// Builds a bank holding every document token's keys and values, computed
    /// window by window as described in the module docs. Keys are stored
    /// before any rotation.
    pub fn generate_memories(&self, doc_tokens: &[u32], stride: usize, window: usize) -> Result<MemoryBank> {
        let mc = self.config();
        if window > mc.comprehensible_window() {
            return Err(Error::Config(format!(
                "input window {window} exceeds the model's {}-token window",
                mc.comprehensible_window()
            )));
        }
        let plan = window_plan(doc_tokens.len(), stride, window)?;
        let plain =
            RetrievalConfig::all_layers(mc.n_layers, 0, stride, mc.position_encoding.memory_mode()).with_layers([]);
        let pieces: Vec<Vec<LayerKv>> = plan
            .par_iter()
            .map(|w| {
                let trace = self.forward(&doc_tokens[w.input_range()], None, &plain, None)?;
                let skip = w.cached.0 - w.input.0;
                Ok(trace
                    .layer_kv
                    .into_iter()
                    .map(|kv| LayerKv {
                        keys: kv.keys.slice(s![.., skip.., ..]).to_owned(),
                        values: kv.values.slice(s![.., skip.., ..]).to_owned(),
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;

        let mut bank = MemoryBank::new(mc.n_layers, mc.n_heads, mc.head_dim, RotationState::Unrotated);
        for (w, layers) in plan.iter().zip(&pieces) {
            let keys: Vec<ArrayView3<f32>> = layers.iter().map(|kv| kv.keys.view()).collect();
            let values: Vec<ArrayView3<f32>> = layers.iter().map(|kv| kv.values.view()).collect();
            bank.append(&keys, &values, &doc_tokens[w.cached_range()])?;
        }
        Ok(bank)
    }

    /// Caches `doc_tokens` with `cfg.stride` over windows of the training
    /// length, then drops `cfg.special_token_ids`.
    pub fn build_bank(&self, doc_tokens: &[u32], cfg: &RetrievalConfig) -> Result<MemoryBank> {
        let window = self.config().max_train_len;
        let bank = self.generate_memories(doc_tokens, cfg.stride, window)?;
        if cfg.special_token_ids.is_empty() {
            Ok(bank)
        } else {
            bank.prune_special_tokens(&cfg.special_token_ids)
        }
    }
}
