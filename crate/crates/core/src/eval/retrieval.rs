//! Question answering over long documents: in-context, truncated, and with
//! the document cached as memories.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::EvalRecord;
use crate::error::{Error, Result};
use crate::generation::{generate, Citation, GenerationConfig};
use crate::memory::{MemoryBank, RetrievalConfig};
use crate::model::Model;
use crate::train::BOS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMethod {
    /// Document and question together in the context.
    InContext,
    /// The last `max_train_len` tokens of document plus question.
    Truncate,
    /// Question in context, document as a memory bank.
    Extended,
}

impl fmt::Display for RetrievalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMethod::InContext => "in_context",
            RetrievalMethod::Truncate => "truncate",
            RetrievalMethod::Extended => "extended",
        })
    }
}

/// Upper edges of the fact-appearance buckets; counts above the last edge
/// share a final bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AppearanceBuckets(pub Vec<usize>);

impl Default for AppearanceBuckets {
    fn default() -> Self {
        Self(vec![1, 2, 3])
    }
}

impl AppearanceBuckets {
    pub fn label(&self, n: usize) -> String {
        let mut lo = 1;
        for &hi in &self.0 {
            if n <= hi {
                return if lo == hi { hi.to_string() } else { format!("{lo}-{hi}") };
            }
            lo = hi + 1;
        }
        format!("{lo}+")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub correct: bool,
    pub generated: Vec<u32>,
    /// Summed over the generated tokens, ranked. Empty without a bank.
    pub citations: Vec<Citation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub method: RetrievalMethod,
    pub overall: Tally,
    pub by_length: BTreeMap<String, Tally>,
    /// Keyed by `(length bucket, appearance bucket)`.
    pub heatmap: BTreeMap<String, BTreeMap<String, Tally>>,
    /// Records rejected before evaluation.
    pub skipped: usize,
    pub outcomes: Vec<RecordOutcome>,
}

impl RetrievalReport {
    /// Plain-text table of accuracy per length bucket, with counts.
    pub fn table(&self) -> String {
        let mut s = "method\tbucket\tcorrect\ttotal\taccuracy\n".to_string();
        for (bucket, t) in &self.by_length {
            s += &format!("{}\t{bucket}\t{}\t{}\t{:.4}\n", self.method, t.correct, t.total, t.accuracy());
        }
        s += &format!(
            "{}\tall\t{}\t{}\t{:.4}\n",
            self.method,
            self.overall.correct,
            self.overall.total,
            self.overall.accuracy()
        );
        s
    }
}

/// Whether `needle` occurs as a contiguous run in `haystack`.
pub fn contains_span(haystack: &[u32], needle: &[u32]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Local prompt and bank for one record under `method`.
pub fn prepare(
    model: &Model,
    record: &EvalRecord,
    method: RetrievalMethod,
    retr: &RetrievalConfig,
) -> Result<(Vec<u32>, Option<MemoryBank>)> {
    let n = model.config().max_train_len;
    match method {
        RetrievalMethod::InContext => Ok(([record.document.as_slice(), &record.question].concat(), None)),
        RetrievalMethod::Truncate => {
            let full = [record.document.as_slice(), &record.question].concat();
            Ok((full[full.len().saturating_sub(n)..].to_vec(), None))
        }
        RetrievalMethod::Extended => {
            let mut prompt = Vec::with_capacity(record.question.len() + 1);
            if record.question.first() != Some(&BOS) {
                prompt.push(BOS);
            }
            prompt.extend_from_slice(&record.question);
            if prompt.len() > n {
                return Err(Error::Contract(format!("question of {} tokens exceeds the context", prompt.len())));
            }
            let bank = if record.document.is_empty() { None } else { Some(model.build_bank(&record.document, retr)?) };
            Ok((prompt, bank))
        }
    }
}

/// Greedy answer for every record, scored by containment of the answer span.
pub fn retrieval_bench(
    model: &Model,
    records: &[EvalRecord],
    method: RetrievalMethod,
    retr: &RetrievalConfig,
    buckets: &AppearanceBuckets,
) -> Result<RetrievalReport> {
    let results: Vec<Option<RecordOutcome>> = records
        .par_iter()
        .map(|r| {
            if let Err(e) = r.validate() {
                log::warn!("skipping record: {e}");
                return Ok(None);
            }
            let (prompt, bank) = prepare(model, r, method, retr)?;
            let gen =
                GenerationConfig { max_new_tokens: r.answer.len(), entropy_threshold: None, ..Default::default() };
            let out = generate(model, &prompt, bank.as_ref(), retr, &gen)?;
            Ok(Some(RecordOutcome {
                correct: contains_span(&out.token_ids, &r.answer),
                citations: out.total_citations(),
                generated: out.token_ids,
            }))
        })
        .collect::<Result<_>>()?;

    let mut report = RetrievalReport {
        method,
        overall: Tally::default(),
        by_length: BTreeMap::new(),
        heatmap: BTreeMap::new(),
        skipped: 0,
        outcomes: Vec::with_capacity(records.len()),
    };
    for (r, res) in records.iter().zip(results) {
        let Some(outcome) = res else {
            report.skipped += 1;
            continue;
        };
        report.overall.add(outcome.correct);
        report.by_length.entry(r.length_bucket.clone()).or_default().add(outcome.correct);
        report
            .heatmap
            .entry(r.length_bucket.clone())
            .or_default()
            .entry(buckets.label(r.n_fact_appearances))
            .or_default()
            .add(outcome.correct);
        report.outcomes.push(outcome);
    }
    Ok(report)
}

/// Mean negative log-likelihood (nats per answer token) of the gold answers
/// with the document cached, for each retrieval budget in `ks`.
pub fn answer_nll_by_k(
    model: &Model,
    records: &[EvalRecord],
    retr: &RetrievalConfig,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let prepared: Vec<(Vec<u32>, Option<MemoryBank>, &EvalRecord)> = records
        .par_iter()
        .map(|r| {
            r.validate()?;
            let (prompt, bank) = prepare(model, r, RetrievalMethod::Extended, retr)?;
            Ok((prompt, bank, r))
        })
        .collect::<Result<_>>()?;
    ks.iter()
        .map(|&k| {
            let cfg = retr.with_k(k);
            let sums: Vec<(f64, usize)> = prepared
                .par_iter()
                .map(|(prompt, bank, r)| {
                    let input = [prompt.as_slice(), &r.answer[..r.answer.len() - 1]].concat();
                    let logits = model.forward(&input, bank.as_ref(), &cfg, None)?.logits;
                    let mut nll = 0.0;
                    for (j, &tok) in r.answer.iter().enumerate() {
                        let row = logits.row(prompt.len() - 1 + j);
                        nll += neg_log_prob(row.as_slice().expect("contiguous logits"), tok);
                    }
                    Ok((nll, r.answer.len()))
                })
                .collect::<Result<_>>()?;
            let (total, count) = sums.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            Ok((k, total / count.max(1) as f64))
        })
        .collect()
}

/// `-log softmax(logits)[target]`, computed in `f64`.
pub fn neg_log_prob(logits: &[f32], target: u32) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target as usize] as f64
}

/// Layer sets compared in the ablation: all, the last half, the last third.
pub fn layer_subsets(n_layers: usize) -> Vec<(&'static str, Vec<usize>)> {
    let half = ((n_layers as f64 / 2.0).round() as usize).clamp(1, n_layers);
    let third = ((n_layers as f64 / 3.0).round() as usize).clamp(1, n_layers);
    vec![
        ("all", (0..n_layers).collect()),
        ("last_half", (n_layers - half..n_layers).collect()),
        ("last_third", (n_layers - third..n_layers).collect()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub layers: Vec<usize>,
    pub accuracy: Tally,
}

/// Extended-method accuracy for each subset from [`layer_subsets`].
pub fn layer_ablation(model: &Model, records: &[EvalRecord], retr: &RetrievalConfig) -> Result<Vec<AblationRow>> {
    layer_subsets(model.config().n_layers)
        .into_iter()
        .map(|(name, layers)| {
            let cfg = retr.with_layers(layers.iter().copied());
            let report =
                retrieval_bench(model, records, RetrievalMethod::Extended, &cfg, &AppearanceBuckets::default())?;
            Ok(AblationRow { name: name.to_string(), layers, accuracy: report.overall })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_containment() {
        assert!(contains_span(&[1, 2, 3, 4], &[2, 3]));
        assert!(!contains_span(&[1, 2, 3, 4], &[3, 2]));
        assert!(!contains_span(&[1], &[1, 2]));
        assert!(!contains_span(&[1, 2], &[]));
    }

    #[test]
    fn appearance_labels() {
        let b = AppearanceBuckets(vec![1, 3, 7]);
        assert_eq!(b.label(1), "1");
        assert_eq!(b.label(2), "2-3");
        assert_eq!(b.label(7), "4-7");
        assert_eq!(b.label(9), "8+");
    }

    #[test]
    fn subsets_for_common_depths() {
        let names = |n| layer_subsets(n).into_iter().map(|(_, l)| l).collect::<Vec<_>>();
        assert_eq!(names(3), vec![vec![0, 1, 2], vec![1, 2], vec![2]]);
        assert_eq!(names(4), vec![vec![0, 1, 2, 3], vec![2, 3], vec![3]]);
        assert_eq!(names(6), vec![(0..6).collect(), vec![3, 4, 5], vec![4, 5]]);
    }

    #[test]
    fn nll_of_uniform_logits() {
        assert!((neg_log_prob(&[0.0; 8], 3) - 8f64.ln()).abs() < 1e-12);
    }
}
