//! Synthetic training tasks.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backprop::Batch;
use crate::error::{Error, Result};
use crate::tokenizer::{CharTokenizer, WordTokenizer};

pub const BOS: u32 = 0;
pub const QUERY: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Next-character prediction on a text corpus.
    CharLm { corpus: String },
    /// Associative recall: facts `k v` followed later by queries `? k v`.
    KvLookup { n_keys: usize, n_values: usize },
}

impl TaskSpec {
    pub fn vocab_size(&self) -> usize {
        match self {
            TaskSpec::CharLm { corpus } => CharTokenizer::from_corpus(corpus).vocab_size(),
            TaskSpec::KvLookup { n_keys, n_values } => KvVocab::new(*n_keys, *n_values).vocab_size(),
        }
    }
}

/// Token layout of the lookup task: `<bos>`, `?`, then keys, then values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvVocab {
    pub n_keys: usize,
    pub n_values: usize,
}

impl KvVocab {
    pub fn new(n_keys: usize, n_values: usize) -> Self {
        Self { n_keys, n_values }
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.n_keys + self.n_values
    }

    pub fn key(&self, i: usize) -> u32 {
        (2 + i) as u32
    }

    pub fn value(&self, i: usize) -> u32 {
        (2 + self.n_keys + i) as u32
    }

    pub fn is_value(&self, tok: u32) -> bool {
        (tok as usize) >= 2 + self.n_keys && (tok as usize) < self.vocab_size()
    }

    pub fn special_tokens(&self) -> BTreeSet<u32> {
        [BOS, QUERY].into()
    }

    pub fn tokenizer(&self) -> WordTokenizer {
        let mut words = vec!["<bos>".to_string(), "?".to_string()];
        words.extend((0..self.n_keys).map(|i| format!("k{i}")));
        words.extend((0..self.n_values).map(|i| format!("v{i}")));
        WordTokenizer::new(words).expect("generated words are distinct")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_keys < 2 || self.n_values < 2 {
            return Err(Error::Config("kv lookup needs at least two keys and two values".into()));
        }
        Ok(())
    }
}

/// Draws lookup-task training sequences of `len` tokens.
///
/// Each sequence has its own key-to-value dictionary. Facts `k v` draw keys
/// with replacement, so keys recur with the same value; queries `? k v` ask
/// about a key already seen. Every value whose key appeared earlier is marked
/// as an answer. About half of the sequences start with `<bos>`; the rest
/// start at an arbitrary offset, like a cache window taken from the middle of
/// a document.
pub fn kv_sequence(vocab: &KvVocab, len: usize, rng: &mut impl Rng) -> (Vec<u32>, Vec<bool>) {
    const P_QUERY: f64 = 0.3;
    let dict: Vec<usize> = (0..vocab.n_keys).map(|_| rng.random_range(0..vocab.n_values)).collect();
    let mut toks = Vec::with_capacity(len + 3);
    let mut answer = Vec::with_capacity(len + 3);
    if rng.random_bool(0.5) {
        toks.push(BOS);
        answer.push(false);
    } else if rng.random_bool(0.5) {
        toks.push(vocab.value(rng.random_range(0..vocab.n_values)));
        answer.push(false);
    }
    let mut seen = vec![false; vocab.n_keys];
    let mut seen_list: Vec<usize> = Vec::new();
    while toks.len() < len {
        let k = match seen_list.choose(rng) {
            Some(&k) if rng.random_bool(P_QUERY) => {
                toks.push(QUERY);
                answer.push(false);
                k
            }
            _ => rng.random_range(0..vocab.n_keys),
        };
        toks.extend([vocab.key(k), vocab.value(dict[k])]);
        answer.extend([false, seen[k]]);
        if !seen[k] {
            seen[k] = true;
            seen_list.push(k);
        }
    }
    toks.truncate(len);
    answer.truncate(len);
    (toks, answer)
}

/// Turns token sequences of length `T + 1` into a next-token batch.
pub(crate) fn shift(seqs: Vec<(Vec<u32>, Vec<bool>)>) -> Batch {
    let mut batch = Batch { inputs: Vec::new(), targets: Vec::new(), mask: Vec::new() };
    for (toks, scored) in seqs {
        batch.inputs.push(toks[..toks.len() - 1].to_vec());
        batch.targets.push(toks[1..].to_vec());
        batch.mask.push(scored[1..].to_vec());
    }
    batch
}

pub fn kv_batch(vocab: &KvVocab, batch_size: usize, seq_len: usize, rng: &mut impl Rng) -> Batch {
    shift((0..batch_size).map(|_| kv_sequence(vocab, seq_len + 1, rng)).collect())
}

/// Random windows of `seq_len + 1` tokens from `ids`, scoring every position.
pub fn lm_batch(ids: &[u32], batch_size: usize, seq_len: usize, rng: &mut impl Rng) -> Result<Batch> {
    if ids.len() <= seq_len {
        return Err(Error::Config(format!("corpus of {} tokens is shorter than a training window", ids.len())));
    }
    Ok(shift(
        (0..batch_size)
            .map(|_| {
                let start = rng.random_range(0..ids.len() - seq_len);
                (ids[start..start + seq_len + 1].to_vec(), vec![true; seq_len + 1])
            })
            .collect(),
    ))
}

/// English-like text drawn from a small grammar. Stands in for a natural
/// corpus when none is available offline.
pub fn procedural_corpus(n_chars: usize, rng: &mut impl Rng) -> String {
    const SUBJECTS: &[&str] = &[
        "the sailor",
        "a merchant",
        "the old captain",
        "my brother",
        "the clerk",
        "a stranger",
        "the harbour master",
        "the widow",
        "our cook",
        "the young doctor",
        "a fisherman",
        "the judge",
    ];
    const VERBS: &[&str] = &[
        "watched",
        "followed",
        "remembered",
        "carried",
        "found",
        "sold",
        "painted",
        "opened",
        "mended",
        "forgot",
        "described",
        "returned",
    ];
    const OBJECTS: &[&str] = &[
        "the lantern",
        "a letter",
        "the brass key",
        "the map of the bay",
        "a wooden chest",
        "the ship",
        "an old coat",
        "the garden gate",
        "a silver coin",
        "the last boat",
        "the grey horse",
        "a bundle of rope",
    ];
    const TAILS: &[&str] = &[
        "before dawn",
        "in the rain",
        "without a word",
        "at the end of the pier",
        "for the third time",
        "after supper",
        "near the mill",
        "with great care",
        "as the bells rang",
        "in silence",
    ];
    let mut out = String::with_capacity(n_chars + 128);
    while out.len() < n_chars {
        let mut sentence = format!(
            "{} {} {}",
            SUBJECTS.choose(rng).expect("non-empty"),
            VERBS.choose(rng).expect("non-empty"),
            OBJECTS.choose(rng).expect("non-empty")
        );
        if rng.random_bool(0.6) {
            sentence.push(' ');
            sentence.push_str(TAILS.choose(rng).expect("non-empty"));
        }
        if rng.random_bool(0.3) {
            sentence.push_str(", and ");
            sentence.push_str(SUBJECTS.choose(rng).expect("non-empty"));
            sentence.push_str(" said nothing");
        }
        let mut chars = sentence.chars();
        if let Some(first) = chars.next() {
            out.extend(first.to_uppercase());
            out.push_str(chars.as_str());
        }
        out.push_str(if rng.random_bool(0.15) { ".\n" } else { ". " });
    }
    out.truncate(n_chars);
    out
}
