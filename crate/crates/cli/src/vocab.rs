//! Token vocabulary stored next to a weights file.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use extmind::tokenizer::{CharTokenizer, WordTokenizer};
use extmind::train::KvVocab;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VocabFile {
    /// Whitespace-separated words. `kv` is set for lookup-task vocabularies.
    Words {
        words: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kv: Option<KvVocab>,
    },
    /// Single characters, in id order.
    Chars { chars: String },
}

#[derive(Debug, Clone)]
pub enum Vocab {
    Words { tok: WordTokenizer, kv: Option<KvVocab> },
    Chars(CharTokenizer),
}

impl Vocab {
    pub fn kv(v: KvVocab) -> Self {
        Vocab::Words { tok: v.tokenizer(), kv: Some(v) }
    }

    pub fn chars(corpus: &str) -> Self {
        Vocab::Chars(CharTokenizer::from_corpus(corpus))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: VocabFile =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(match file {
            VocabFile::Words { words, kv } => Vocab::Words { tok: WordTokenizer::new(words)?, kv },
            VocabFile::Chars { chars } => {
                let tok = CharTokenizer::from_corpus(&chars);
                if tok.vocab_size() != chars.chars().count() {
                    return Err(CliError::Config(format!("{}: characters are not distinct", path.display())));
                }
                Vocab::Chars(tok)
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = match self {
            Vocab::Words { tok, kv } => {
                VocabFile::Words { words: (0..tok.vocab_size() as u32).map(|i| tok.decode(&[i])).collect(), kv: *kv }
            }
            Vocab::Chars(tok) => {
                VocabFile::Chars { chars: tok.decode(&(0..tok.vocab_size() as u32).collect::<Vec<_>>()) }
            }
        };
        let json = serde_json::to_string_pretty(&file).expect("vocabulary serializes");
        fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn size(&self) -> usize {
        match self {
            Vocab::Words { tok, .. } => tok.vocab_size(),
            Vocab::Chars(tok) => tok.vocab_size(),
        }
    }

    pub fn kv_layout(&self) -> Option<KvVocab> {
        match self {
            Vocab::Words { kv, .. } => *kv,
            Vocab::Chars(_) => None,
        }
    }

    pub fn words(&self) -> Option<&WordTokenizer> {
        match self {
            Vocab::Words { tok, .. } => Some(tok),
            Vocab::Chars(_) => None,
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(match self {
            Vocab::Words { tok, .. } => tok.encode(text)?,
            Vocab::Chars(tok) => tok.encode(text)?,
        })
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        match self {
            Vocab::Words { tok, .. } => tok.decode(ids),
            Vocab::Chars(tok) => tok.decode(ids),
        }
    }

    /// Ids of single tokens named in a config, such as special or stop tokens.
    pub fn ids(&self, tokens: &[String]) -> Result<BTreeSet<u32>> {
        tokens
            .iter()
            .map(|t| match self.encode(t).ok().as_deref() {
                Some(&[id]) => Ok(id),
                _ => Err(CliError::Config(format!("{t:?} is not a single vocabulary token"))),
            })
            .collect()
    }

    /// Special tokens pruned from banks unless the config names others.
    pub fn default_special_tokens(&self) -> Vec<String> {
        match self {
            Vocab::Words { tok, kv: Some(_) } => {
                vec![tok.decode(&[extmind::train::BOS]), tok.decode(&[extmind::train::QUERY])]
            }
            _ => Vec::new(),
        }
    }
}
