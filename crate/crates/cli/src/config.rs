//! Run configuration: a TOML file, then `--set` overrides, then dedicated
//! flags. Settings whose default depends on the model stay `None` until
//! [`RunConfig::resolve`] fills them in.

use std::path::{Path, PathBuf};

use extmind::eval::{PerplexityMethod, RetrievalMethod};
use extmind::generation::{DecodeMode, GenerationConfig, RegenerationScope, DEFAULT_ENTROPY_THRESHOLD};
use extmind::memory::{MemoryQuery, RetrievalConfig, DEFAULT_SIM_THRESHOLD};
use extmind::model::{ModelConfig, PositionEncoding};
use extmind::train::{TaskSpec, TrainOptions};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};
use crate::vocab::Vocab;

/// The keyword `"none"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Off {
    None,
}

/// A number or `"none"` to disable the feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Switch {
    Value(f64),
    Off(Off),
}

impl Switch {
    pub fn value(self) -> Option<f64> {
        match self {
            Switch::Value(v) => Some(v),
            Switch::Off(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum All {
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Layers {
    All(All),
    List(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    KvLookup,
    CharLm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Required by every stochastic path.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub model: ModelSection,
    pub train: TrainSection,
    pub retrieval: RetrievalSection,
    pub generation: GenerationSection,
    pub cache: CacheSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub weights: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub task: Task,
    pub n_keys: usize,
    pub n_values: usize,
    /// Text file for `char_lm`; a generated corpus is used when absent.
    pub corpus: Option<PathBuf>,
    pub corpus_chars: usize,
    pub position_encoding: PositionEncoding,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub max_train_len: usize,
    pub ffn_mult: f32,
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub target_accuracy: Switch,
}

impl Default for TrainSection {
    fn default() -> Self {
        let toy = ModelConfig::toy(0, PositionEncoding::Rope);
        let opts = TrainOptions::default();
        Self {
            task: Task::KvLookup,
            n_keys: 32,
            n_values: 32,
            corpus: None,
            corpus_chars: 200_000,
            position_encoding: toy.position_encoding,
            n_layers: toy.n_layers,
            n_heads: toy.n_heads,
            head_dim: toy.head_dim,
            max_train_len: toy.max_train_len,
            ffn_mult: toy.ffn_mult,
            max_steps: opts.max_steps,
            batch_size: opts.batch_size,
            learning_rate: opts.learning_rate,
            warmup_steps: opts.warmup_steps,
            clip_norm: opts.clip_norm,
            eval_every: opts.eval_every,
            eval_batches: opts.eval_batches,
            target_accuracy: opts.target_accuracy.map_or(Switch::Off(Off::None), Switch::Value),
        }
    }
}

impl TrainSection {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            max_train_len: self.max_train_len,
            ffn_mult: self.ffn_mult,
            ..ModelConfig::toy(vocab_size, self.position_encoding)
        }
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
            eval_every: self.eval_every,
            eval_batches: self.eval_batches,
            target_accuracy: self.target_accuracy.value(),
        }
    }

    pub fn task_spec(&self, corpus: Option<String>) -> TaskSpec {
        match (self.task, corpus) {
            (Task::CharLm, Some(corpus)) => TaskSpec::CharLm { corpus },
            _ => TaskSpec::KvLookup { n_keys: self.n_keys, n_values: self.n_values },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    /// Defaults to 0.25 for ALiBi models and `"none"` for rotary ones.
    pub sim_threshold: Option<Switch>,
    /// Defaults to half the training length.
    pub stride: Option<usize>,
    pub layers: Layers,
    /// Defaults to `<bos>` and `?` for lookup vocabularies, nothing otherwise.
    pub special_tokens: Option<Vec<String>>,
    pub memory_query: MemoryQuery,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            k: 1,
            sim_threshold: None,
            stride: None,
            layers: Layers::All(All::All),
            special_tokens: None,
            memory_query: MemoryQuery::Unrotated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub prompt: Option<String>,
    /// Bank to retrieve from; plain generation when absent.
    pub bank: Option<PathBuf>,
    pub max_new_tokens: usize,
    pub k_base: usize,
    pub k_boost: usize,
    pub entropy_threshold: Switch,
    pub regeneration_scope: RegenerationScope,
    /// Greedy decoding when `"none"`.
    pub temperature: Switch,
    pub stop_tokens: Vec<String>,
    pub layer_traces: bool,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            prompt: None,
            bank: None,
            max_new_tokens: g.max_new_tokens,
            k_base: g.k_base,
            k_boost: g.k_boost,
            entropy_threshold: Switch::Value(DEFAULT_ENTROPY_THRESHOLD),
            regeneration_scope: g.regeneration_scope,
            temperature: Switch::Off(Off::None),
            stop_tokens: Vec::new(),
            layer_traces: g.layer_traces,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub document: Option<PathBuf>,
    /// Input window per caching pass; defaults to the training length.
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub ppl: PplSection,
    pub retrieval: RetrievalBenchSection,
    pub timing: TimingSection,
    pub plots: Plots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Plots(pub bool);

impl Default for Plots {
    fn default() -> Self {
        Plots(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PplSection {
    /// Text file; a generated corpus is used when absent.
    pub corpus: Option<PathBuf>,
    pub corpus_tokens: usize,
    pub methods: Vec<PerplexityMethod>,
    /// Defaults to N, 2N and 4N.
    pub lengths: Option<Vec<usize>>,
    /// Defaults to the training length.
    pub eval_stride: Option<usize>,
}

impl Default for PplSection {
    fn default() -> Self {
        Self {
            corpus: None,
            corpus_tokens: 4096,
            methods: vec![PerplexityMethod::Truncate, PerplexityMethod::Extended],
            lengths: None,
            eval_stride: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalBenchSection {
    /// Line-delimited records; a lookup dataset is generated when absent.
    pub dataset: Option<PathBuf>,
    /// Defaults to 2N and 4N.
    pub doc_lengths: Option<Vec<usize>>,
    pub records_per_length: usize,
    /// Defaults to the training length.
    pub min_distance: Option<usize>,
    pub max_appearances: usize,
    pub methods: Vec<RetrievalMethod>,
    pub appearance_buckets: Vec<usize>,
}

impl Default for RetrievalBenchSection {
    fn default() -> Self {
        Self {
            dataset: None,
            doc_lengths: None,
            records_per_length: 100,
            min_distance: None,
            max_appearances: 3,
            methods: vec![RetrievalMethod::Truncate, RetrievalMethod::Extended],
            appearance_buckets: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingSection {
    pub document: Option<PathBuf>,
    /// Defaults to eight caching windows.
    pub doc_tokens: Option<usize>,
    pub n_queries: usize,
    /// Defaults to twice the training length.
    pub window: Option<usize>,
    /// Defaults to the window and half of it.
    pub strides: Option<Vec<usize>>,
    pub repetitions: usize,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self { document: None, doc_tokens: None, n_queries: 20, window: None, strides: None, repetitions: 5 }
    }
}

/// Inserts `value` at a dotted `path`, creating tables on the way.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last =
        parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Config(format!("empty key in {path:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("{p} in {path:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`. The value is read as TOML and falls back to a plain
/// string, so `--set generation.prompt=? k3` needs no quoting.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| CliError::Config(format!("expected key=value, got {s:?}")))?;
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

impl RunConfig {
    /// Builds the configuration from an optional file plus overrides, applied
    /// in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str::<Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    pub fn seed(&self, what: &str) -> Result<u64> {
        self.seed.ok_or_else(|| CliError::Config(format!("{what} is stochastic and needs a seed")))
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir.as_deref().ok_or_else(|| CliError::Config("output_dir is not set".into()))
    }

    /// Fills every model-dependent default, so the manifest shows the values
    /// actually used.
    pub fn resolve(&mut self, model: &ModelConfig, vocab: &Vocab) {
        let n = model.max_train_len;
        let r = &mut self.retrieval;
        r.stride.get_or_insert((n / 2).max(1));
        r.sim_threshold.get_or_insert(match model.position_encoding {
            PositionEncoding::Alibi => Switch::Value(DEFAULT_SIM_THRESHOLD as f64),
            PositionEncoding::Rope => Switch::Off(Off::None),
        });
        r.special_tokens.get_or_insert_with(|| vocab.default_special_tokens());
        self.cache.window.get_or_insert(n);
        let b = &mut self.bench;
        b.ppl.lengths.get_or_insert_with(|| vec![n, 2 * n, 4 * n]);
        b.ppl.eval_stride.get_or_insert(n);
        b.retrieval.doc_lengths.get_or_insert_with(|| vec![2 * n, 4 * n]);
        b.retrieval.min_distance.get_or_insert(n);
        let window = *b.timing.window.get_or_insert(2 * n);
        b.timing.doc_tokens.get_or_insert(8 * window);
        b.timing.strides.get_or_insert_with(|| vec![(window / 2).max(1), window]);
    }

    /// Retrieval settings for `model`; call after [`RunConfig::resolve`].
    pub fn retrieval_config(&self, model: &ModelConfig, vocab: &Vocab) -> Result<RetrievalConfig> {
        let r = &self.retrieval;
        let mut cfg = RetrievalConfig::all_layers(
            model.n_layers,
            r.k,
            r.stride.expect("resolved"),
            model.position_encoding.memory_mode(),
        );
        if let Layers::List(l) = &r.layers {
            cfg = cfg.with_layers(l.iter().copied());
        }
        cfg.sim_threshold = r.sim_threshold.and_then(Switch::value).map(|t| t as f32);
        cfg.special_token_ids = vocab.ids(r.special_tokens.as_deref().unwrap_or_default())?;
        cfg.memory_query = r.memory_query;
        cfg.validate(model.n_layers)?;
        Ok(cfg)
    }

    pub fn generation_config(&self, vocab: &Vocab) -> Result<GenerationConfig> {
        let g = &self.generation;
        let decode_mode = match g.temperature.value() {
            None => DecodeMode::Greedy,
            Some(temperature) => DecodeMode::Sample { temperature, seed: self.seed("sampling")? },
        };
        let cfg = GenerationConfig {
            max_new_tokens: g.max_new_tokens,
            decode_mode,
            k_base: g.k_base,
            k_boost: g.k_boost,
            entropy_threshold: g.entropy_threshold.value(),
            stop_token_ids: vocab.ids(&g.stop_tokens)?,
            regeneration_scope: g.regeneration_scope,
            layer_traces: g.layer_traces,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
