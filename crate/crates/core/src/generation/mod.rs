//! Autoregressive decoding with citation tracking and entropy-triggered
//! regeneration.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{MemoryBank, RetrievalConfig, RetrievalResult};
use crate::model::{KvCache, Model};

/// Default entropy (nats) above which a token is regenerated.
pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// What is recomputed with the larger retrieval budget once a step's entropy
/// crosses the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegenerationScope {
    /// Only the triggering step; later steps return to `k_base`.
    #[default]
    Token,
    /// The triggering step and every step after it.
    Suffix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub decode_mode: DecodeMode,
    pub k_base: usize,
    pub k_boost: usize,
    /// `None` disables regeneration.
    pub entropy_threshold: Option<f64>,
    pub stop_token_ids: BTreeSet<u32>,
    pub regeneration_scope: RegenerationScope,
    /// Also record citation counts per layer.
    pub layer_traces: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 16,
            decode_mode: DecodeMode::Greedy,
            k_base: 1,
            k_boost: 3,
            entropy_threshold: Some(DEFAULT_ENTROPY_THRESHOLD),
            stop_token_ids: BTreeSet::new(),
            regeneration_scope: RegenerationScope::Token,
            layer_traces: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entropy_threshold.is_some_and(f64::is_nan) {
            return Err(Error::Config("entropy threshold is NaN".into()));
        }
        if self.entropy_threshold.is_some() && self.k_boost < self.k_base {
            return Err(Error::Config(format!("k_boost {} is below k_base {}", self.k_boost, self.k_base)));
        }
        if let DecodeMode::Sample { temperature, .. } = self.decode_mode {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
            }
        }
        Ok(())
    }
}

/// Memory index (original document position) and how often it was retrieved.
pub type Citation = (u32, u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub token_ids: Vec<u32>,
    /// Entropy (nats) of the distribution each kept token was chosen from.
    pub entropies: Vec<f64>,
    /// Per token, ranked by count.
    pub citations: Vec<Vec<Citation>>,
    pub regenerated: Vec<bool>,
    /// Per token and layer, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_citations: Option<Vec<Vec<Vec<Citation>>>>,
    pub k_base: usize,
    pub k_boost: usize,
    pub entropy_threshold: Option<f64>,
}

impl GenerationOutput {
    fn new(k_base: usize, k_boost: usize, threshold: Option<f64>, layer_traces: bool) -> Self {
        Self {
            token_ids: Vec::new(),
            entropies: Vec::new(),
            citations: Vec::new(),
            regenerated: Vec::new(),
            layer_citations: layer_traces.then(Vec::new),
            k_base,
            k_boost,
            entropy_threshold: threshold,
        }
    }

    /// Writes the record as one line of JSON.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *w, self).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    }

    /// Citations summed over every generated token.
    pub fn total_citations(&self) -> Vec<Citation> {
        aggregate_citations(self.citations.iter().map(|c| c.iter().copied()))
    }
}

/// Entropy in nats of `softmax(logits)`. Entries equal to `-inf` carry no
/// probability.
pub fn token_entropy(logits: &[f32]) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if !max.is_finite() {
        return 0.0;
    }
    let mut z = 0.0;
    let mut weighted = 0.0;
    for &l in logits {
        let shifted = l as f64 - max;
        let e = shifted.exp();
        if e > 0.0 {
            z += e;
            weighted += e * shifted;
        }
    }
    (z.ln() - weighted / z).max(0.0)
}

/// Retrieval counts at query row `row`, summed over layers and heads. Masked
/// entries are skipped and indices are mapped to original document positions.
pub fn citation_counts(
    retrievals: &[Option<Vec<RetrievalResult>>],
    row: usize,
    bank: &MemoryBank,
) -> BTreeMap<u32, u32> {
    let mut counts = BTreeMap::new();
    for layer in retrievals.iter().flatten() {
        add_layer_counts(layer, row, bank, &mut counts);
    }
    counts
}

fn add_layer_counts(heads: &[RetrievalResult], row: usize, bank: &MemoryBank, counts: &mut BTreeMap<u32, u32>) {
    let original = bank.original_positions();
    for r in heads {
        for (&idx, &keep) in r.indices(row).iter().zip(r.mask(row)) {
            if keep {
                *counts.entry(original[idx as usize]).or_insert(0) += 1;
            }
        }
    }
}

/// Sums citation counts over a sequence of traces and ranks them by count,
/// ties broken by the lower index.
pub fn aggregate_citations<I, C>(traces: I) -> Vec<Citation>
where
    I: IntoIterator<Item = C>,
    C: IntoIterator<Item = Citation>,
{
    let mut total: BTreeMap<u32, u32> = BTreeMap::new();
    for trace in traces {
        for (idx, n) in trace {
            *total.entry(idx).or_insert(0) += n;
        }
    }
    let mut ranked: Vec<Citation> = total.into_iter().filter(|&(_, n)| n > 0).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

struct Step {
    token: u32,
    entropy: f64,
    citations: Vec<Citation>,
    layers: Vec<Vec<Citation>>,
}

struct Decoder<'a> {
    model: &'a Model,
    bank: Option<&'a MemoryBank>,
    gen: &'a GenerationConfig,
    rng: Option<ChaCha8Rng>,
}

impl Decoder<'_> {
    fn new<'a>(model: &'a Model, bank: Option<&'a MemoryBank>, gen: &'a GenerationConfig) -> Result<Decoder<'a>> {
        gen.validate()?;
        let rng = match gen.decode_mode {
            DecodeMode::Greedy => None,
            DecodeMode::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Ok(Decoder { model, bank, gen, rng })
    }

    /// Feeds `input` after the cached positions and picks the next token.
    fn step(&mut self, input: &[u32], cfg: &RetrievalConfig, cache: &mut KvCache) -> Result<Step> {
        let trace = self.model.forward(input, self.bank, cfg, Some(cache))?;
        let last = trace.logits.nrows() - 1;
        let logits = trace.logits.row(last).to_vec();
        let entropy = token_entropy(&logits);
        let token = self.pick(&logits)?;
        let (citations, layers) = match self.bank {
            Some(bank) => {
                let counts = citation_counts(&trace.retrievals, last, bank);
                let layers = if self.gen.layer_traces {
                    trace
                        .retrievals
                        .iter()
                        .map(|l| {
                            let mut c = BTreeMap::new();
                            if let Some(heads) = l {
                                add_layer_counts(heads, last, bank, &mut c);
                            }
                            aggregate_citations([c])
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                (aggregate_citations([counts]), layers)
            }
            None => (Vec::new(), vec![Vec::new(); if self.gen.layer_traces { trace.retrievals.len() } else { 0 }]),
        };
        Ok(Step { token, entropy, citations, layers })
    }

    fn pick(&mut self, logits: &[f32]) -> Result<u32> {
        match (self.gen.decode_mode, self.rng.as_mut()) {
            (DecodeMode::Sample { temperature, .. }, Some(rng)) => {
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let weights: Vec<f64> = logits.iter().map(|&l| ((l as f64 - max) / temperature).exp()).collect();
                let dist = WeightedIndex::new(&weights).map_err(|e| Error::Numeric(e.to_string()))?;
                Ok(dist.sample(rng) as u32)
            }
            _ => Ok(greedy(logits)),
        }
    }

    fn run(
        &mut self,
        prompt: &[u32],
        base: &RetrievalConfig,
        boost: Option<(&RetrievalConfig, f64)>,
    ) -> Result<GenerationOutput> {
        if prompt.is_empty() {
            return Err(Error::Contract("prompt must not be empty".into()));
        }
        let gen = self.gen;
        let mut out =
            GenerationOutput::new(base.k, boost.map_or(base.k, |(b, _)| b.k), boost.map(|(_, t)| t), gen.layer_traces);
        let mut cache = self.model.new_cache();
        let mut input = prompt.to_vec();
        let mut boosted_from_here = false;
        for _ in 0..gen.max_new_tokens {
            let start = cache.len();
            let (step, regenerated) = match boost {
                Some((boost_cfg, _)) if boosted_from_here => (self.step(&input, boost_cfg, &mut cache)?, true),
                Some((boost_cfg, threshold)) => {
                    let first = self.step(&input, base, &mut cache)?;
                    if first.entropy > threshold {
                        cache.truncate(start);
                        if gen.regeneration_scope == RegenerationScope::Suffix {
                            boosted_from_here = true;
                        }
                        (self.step(&input, boost_cfg, &mut cache)?, true)
                    } else {
                        (first, false)
                    }
                }
                None => (self.step(&input, base, &mut cache)?, false),
            };
            out.token_ids.push(step.token);
            out.entropies.push(step.entropy);
            out.citations.push(step.citations);
            out.regenerated.push(regenerated);
            if let Some(l) = out.layer_citations.as_mut() {
                l.push(step.layers);
            }
            if gen.stop_token_ids.contains(&step.token) {
                break;
            }
            input = vec![step.token];
        }
        Ok(out)
    }
}

/// Index of the largest logit; ties go to the lower index.
pub(crate) fn greedy(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Decodes up to `gen.max_new_tokens` tokens after `prompt`, retrieving
/// `retr.k` memories per query from `bank` on the augmented layers.
pub fn generate(
    model: &Model,
    prompt: &[u32],
    bank: Option<&MemoryBank>,
    retr: &RetrievalConfig,
    gen: &GenerationConfig,
) -> Result<GenerationOutput> {
    Decoder::new(model, bank, gen)?.run(prompt, retr, None)
}

/// Decodes with `gen.k_base`; any step whose entropy exceeds
/// `gen.entropy_threshold` is recomputed with `gen.k_boost` and the boosted
/// token is kept.
pub fn regenerate_uncertain(
    model: &Model,
    prompt: &[u32],
    bank: Option<&MemoryBank>,
    retr: &RetrievalConfig,
    gen: &GenerationConfig,
) -> Result<GenerationOutput> {
    let threshold =
        gen.entropy_threshold.ok_or_else(|| Error::Config("regeneration needs an entropy threshold".into()))?;
    let base = retr.with_k(gen.k_base);
    let boost = retr.with_k(gen.k_boost);
    Decoder::new(model, bank, gen)?.run(prompt, &base, Some((&boost, threshold)))
}

/// One full generation per retrieval budget in `ks`.
pub fn k_sweep(
    model: &Model,
    prompt: &[u32],
    bank: Option<&MemoryBank>,
    retr: &RetrievalConfig,
    gen: &GenerationConfig,
    ks: &[usize],
) -> Result<Vec<(usize, GenerationOutput)>> {
    ks.iter().map(|&k| Ok((k, generate(model, prompt, bank, &retr.with_k(k), gen)?))).collect()
}
