//! Two small tokenizers: characters for language-model corpora and
//! whitespace-separated words over a fixed vocabulary.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharTokenizer {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl CharTokenizer {
    /// Vocabulary of every distinct character in `corpus`, sorted.
    pub fn from_corpus(corpus: &str) -> Self {
        let chars: Vec<char> = corpus.chars().collect::<BTreeSet<_>>().into_iter().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        Self { chars, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.index.get(&c).copied().ok_or_else(|| Error::Format(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.chars.get(i as usize).copied().unwrap_or('\u{fffd}')).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordTokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl WordTokenizer {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("vocabulary word {w:?} is empty or contains whitespace")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Format(format!("unknown word {w:?}"))))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.words.get(i as usize).map_or("<unk>", String::as_str)).collect::<Vec<_>>().join(" ")
    }
}
