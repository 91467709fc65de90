//! Question-answering records over long documents.

use std::io::{BufRead, Write};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::WordTokenizer;
use crate::train::{KvVocab, BOS, QUERY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub document: Vec<u32>,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub length_bucket: String,
    pub n_fact_appearances: usize,
    /// Half-open document ranges holding the fact, when known.
    #[serde(default)]
    pub fact_spans: Vec<(usize, usize)>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.answer.is_empty() {
            return Err(Error::Format("empty answer".into()));
        }
        if self.question.is_empty() {
            return Err(Error::Format("empty question".into()));
        }
        if self.n_fact_appearances == 0 {
            return Err(Error::Format("fact_appearances must be >= 1".into()));
        }
        Ok(())
    }
}

/// One line of a dataset file. Text fields are tokenized on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub document: String,
    pub question: String,
    pub answer: String,
    pub bucket: String,
    pub fact_appearances: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedDataset {
    pub records: Vec<EvalRecord>,
    /// Lines that failed to parse, tokenize or validate.
    pub skipped: usize,
}

/// Reads line-delimited records. Malformed lines are logged and counted, not
/// fatal; blank lines are ignored.
pub fn read_jsonl(reader: impl BufRead, tokenizer: &WordTokenizer) -> Result<LoadedDataset> {
    let mut out = LoadedDataset::default();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, tokenizer) {
            Ok(r) => out.records.push(r),
            Err(e) => {
                warn!("skipping record on line {}: {e}", line_no + 1);
                out.skipped += 1;
            }
        }
    }
    Ok(out)
}

fn parse_line(line: &str, tokenizer: &WordTokenizer) -> Result<EvalRecord> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
    let n_fact_appearances = usize::try_from(raw.fact_appearances)
        .map_err(|_| Error::Format(format!("fact_appearances {} is negative", raw.fact_appearances)))?;
    let record = EvalRecord {
        document: tokenizer.encode(&raw.document)?,
        question: tokenizer.encode(&raw.question)?,
        answer: tokenizer.encode(&raw.answer)?,
        length_bucket: raw.bucket,
        n_fact_appearances,
        fact_spans: Vec::new(),
    };
    record.validate()?;
    Ok(record)
}

pub fn write_jsonl(records: &[EvalRecord], tokenizer: &WordTokenizer, w: &mut impl Write) -> Result<()> {
    for r in records {
        let raw = RawRecord {
            document: tokenizer.decode(&r.document),
            question: tokenizer.decode(&r.question),
            answer: tokenizer.decode(&r.answer),
            bucket: r.length_bucket.clone(),
            fact_appearances: r.n_fact_appearances as i64,
        };
        serde_json::to_writer(&mut *w, &raw).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Shape of a generated lookup dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvDatasetSpec {
    pub vocab: KvVocab,
    /// Document lengths in tokens; each becomes a bucket named by its length.
    pub doc_lengths: Vec<usize>,
    pub records_per_length: usize,
    /// Every copy of the asked-about fact lies before this many final
    /// document tokens.
    pub min_distance: usize,
    /// Copies of the fact are drawn uniformly from `1..=max_appearances`.
    pub max_appearances: usize,
}

/// Documents of `k v` facts starting with `<bos>`. Each document has its own
/// key-to-value dictionary and draws fact keys with replacement. The question
/// is `? k` for a target key and the answer is its value; the target key
/// appears exactly `n_fact_appearances` times, all at least `min_distance`
/// tokens before the end.
pub fn kv_dataset(spec: &KvDatasetSpec, rng: &mut impl Rng) -> Result<Vec<EvalRecord>> {
    let v = &spec.vocab;
    v.validate()?;
    if spec.max_appearances == 0 {
        return Err(Error::Config("max_appearances must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(spec.doc_lengths.len() * spec.records_per_length);
    for &len in &spec.doc_lengths {
        let n_facts = len.saturating_sub(1) / 2;
        let eligible = (len.saturating_sub(spec.min_distance + 1)) / 2;
        if n_facts == 0 || eligible == 0 {
            return Err(Error::Config(format!(
                "document length {len} leaves no room before the last {} tokens",
                spec.min_distance
            )));
        }
        for _ in 0..spec.records_per_length {
            let dict: Vec<usize> = (0..v.n_keys).map(|_| rng.random_range(0..v.n_values)).collect();
            let target = rng.random_range(0..v.n_keys);
            let other = |rng: &mut _| {
                let k = Rng::random_range(rng, 0..v.n_keys - 1);
                if k >= target {
                    k + 1
                } else {
                    k
                }
            };
            let mut keys: Vec<usize> = (0..n_facts).map(|_| other(rng)).collect();
            let copies = rng.random_range(1..=spec.max_appearances.min(eligible));
            let mut slots: Vec<usize> = (0..eligible).collect();
            slots.shuffle(rng);
            for &s in &slots[..copies] {
                keys[s] = target;
            }
            let mut document = Vec::with_capacity(len);
            document.push(BOS);
            let mut fact_spans = Vec::with_capacity(copies);
            for &k in &keys {
                if k == target {
                    fact_spans.push((document.len(), document.len() + 2));
                }
                document.push(v.key(k));
                document.push(v.value(dict[k]));
            }
            if document.len() < len {
                let k = other(rng);
                document.push(v.key(k));
            }
            out.push(EvalRecord {
                document,
                question: vec![QUERY, v.key(target)],
                answer: vec![v.value(dict[target])],
                length_bucket: len.to_string(),
                n_fact_appearances: copies,
                fact_spans,
            });
        }
    }
    Ok(out)
}
