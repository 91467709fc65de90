//! Wall-clock cost of answering many queries about one document.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::RetrievalConfig;
use crate::model::{extra_windows, Model};
use crate::train::BOS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingOptions {
    /// Input window used to cache the document.
    pub window: usize,
    pub strides: Vec<usize>,
    /// Timed repetitions per measurement; the median is kept.
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingCurve {
    pub method: String,
    /// One-off cost before the first query (seconds).
    pub setup_seconds: f64,
    pub per_query_seconds: Vec<f64>,
    /// Setup plus all queries so far.
    pub cumulative_seconds: Vec<f64>,
    /// Windows executed to cache the document, for the extended method.
    pub cache_windows: Option<usize>,
    pub stride: Option<usize>,
    /// First query count at which this curve is cheaper than naive
    /// recomputation.
    pub crossover_vs_naive: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub doc_tokens: usize,
    pub n_queries: usize,
    pub curves: Vec<TimingCurve>,
    pub machine: String,
}

impl TimingReport {
    pub fn curve(&self, method: &str) -> Option<&TimingCurve> {
        self.curves.iter().find(|c| c.method == method)
    }

    pub fn table(&self) -> String {
        let mut s = String::from("method\tsetup_s\tmedian_query_s\ttotal_s\tcache_windows\tcrossover\n");
        for c in &self.curves {
            let mut q = c.per_query_seconds.clone();
            q.sort_by(f64::total_cmp);
            let median = q.get(q.len() / 2).copied().unwrap_or(0.0);
            s += &format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
                c.method,
                c.setup_seconds,
                median,
                c.cumulative_seconds.last().copied().unwrap_or(c.setup_seconds),
                c.cache_windows.map_or("-".into(), |w| w.to_string()),
                c.crossover_vs_naive.map_or("-".into(), |w| w.to_string())
            );
        }
        s
    }
}

/// Median of `reps` timed runs after one untimed warm-up.
fn timed<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(f()?);
        samples.push(t.elapsed().as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[samples.len() / 2])
}

fn curve(method: String, setup: f64, per_query: Vec<f64>) -> TimingCurve {
    let mut total = setup;
    let cumulative = per_query
        .iter()
        .map(|q| {
            total += q;
            total
        })
        .collect();
    TimingCurve {
        method,
        setup_seconds: setup,
        per_query_seconds: per_query,
        cumulative_seconds: cumulative,
        cache_windows: None,
        stride: None,
        crossover_vs_naive: None,
    }
}

/// Times three ways of answering every query about `doc`:
///
/// - `naive`: document and query recomputed together each time;
/// - `kv_cache`: the document's keys/values computed once, the query appended
///   to a copy of that cache;
/// - `extended@s`: the document cached as memories at stride `s`, then only
///   the query in context.
///
/// Runs on the calling thread; callers wanting stable numbers should use a
/// single-threaded pool.
pub fn timing_bench(
    model: &Model,
    doc: &[u32],
    queries: &[Vec<u32>],
    retr: &RetrievalConfig,
    opts: &TimingOptions,
) -> Result<TimingReport> {
    if queries.is_empty() || queries.iter().any(Vec::is_empty) {
        return Err(Error::Config("timing needs at least one non-empty query".into()));
    }
    if opts.repetitions == 0 || opts.strides.is_empty() {
        return Err(Error::Config("timing needs repetitions >= 1 and at least one stride".into()));
    }
    let mut curves = Vec::new();

    let naive: Vec<f64> = queries
        .iter()
        .map(|q| {
            let input = [doc, q.as_slice()].concat();
            timed(opts.repetitions, || model.forward(&input, None, retr, None))
        })
        .collect::<Result<_>>()?;
    curves.push(curve("naive".into(), 0.0, naive));

    let mut doc_cache = model.new_cache();
    let setup = timed(opts.repetitions, || {
        let mut c = model.new_cache();
        model.forward(doc, None, retr, Some(&mut c))
    })?;
    model.forward(doc, None, retr, Some(&mut doc_cache))?;
    let per: Vec<f64> = queries
        .iter()
        .map(|q| {
            timed(opts.repetitions, || {
                let mut c = doc_cache.clone();
                model.forward(q, None, retr, Some(&mut c))
            })
        })
        .collect::<Result<_>>()?;
    curves.push(curve("kv_cache".into(), setup, per));

    for &stride in &opts.strides {
        let cfg = RetrievalConfig { stride, ..retr.clone() };
        let build = || {
            let bank = model.generate_memories(doc, stride, opts.window)?;
            if cfg.special_token_ids.is_empty() {
                Ok(bank)
            } else {
                bank.prune_special_tokens(&cfg.special_token_ids)
            }
        };
        let setup = timed(opts.repetitions, build)?;
        let bank = build()?;
        let per: Vec<f64> = queries
            .iter()
            .map(|q| {
                let prompt = [&[BOS], q.as_slice()].concat();
                timed(opts.repetitions, || model.forward(&prompt, Some(&bank), &cfg, None))
            })
            .collect::<Result<_>>()?;
        let mut c = curve(format!("extended@{stride}"), setup, per);
        c.cache_windows = Some(extra_windows(doc.len(), stride, opts.window) + 1);
        c.stride = Some(stride);
        curves.push(c);
    }

    let naive_cum = curves[0].cumulative_seconds.clone();
    for c in curves.iter_mut().skip(1) {
        c.crossover_vs_naive = c.cumulative_seconds.iter().zip(&naive_cum).position(|(a, b)| a < b).map(|i| i + 1);
    }
    Ok(TimingReport { doc_tokens: doc.len(), n_queries: queries.len(), curves, machine: machine_description() })
}

pub fn machine_description() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .map(|l| l.split(':').nth(1).unwrap_or("").trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{cpu}; {threads} hardware threads; {} {}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Predicted operation counts for one batch of queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// `d * n_q * (n_q + k) + n_q * RT(n_D, k)`
    pub extended: f64,
    /// `d * (n_D + n_q)^2`
    pub classic: f64,
}

/// Attention cost of `n_q` query tokens with `k` retrieved memories from a
/// document of `n_d` tokens, versus full self-attention over both.
/// `retrieval_cost(n_d, k)` is the cost of one top-k lookup.
pub fn cost_model(
    n_q: f64,
    n_d: f64,
    k: f64,
    d: f64,
    retrieval_cost: impl Fn(f64, f64) -> f64,
) -> Result<CostEstimate> {
    if [n_q, n_d, k, d].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Config("cost model arguments must be finite and non-negative".into()));
    }
    Ok(CostEstimate { extended: d * n_q * (n_q + k) + n_q * retrieval_cost(n_d, k), classic: d * (n_d + n_q).powi(2) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_model_examples() {
        let c = cost_model(10.0, 100.0, 0.0, 4.0, |_, _| 0.0).unwrap();
        assert_eq!(c.extended, 4.0 * 100.0);
        assert_eq!(c.classic, 4.0 * 110.0 * 110.0);
        assert!(c.extended < c.classic);

        let c = cost_model(10.0, 0.0, 0.0, 4.0, |_, _| 0.0).unwrap();
        assert_eq!(c.extended, c.classic);

        let c = cost_model(64.0, 4096.0, 8.0, 32.0, |n, _| n * 32.0).unwrap();
        assert_eq!(c.extended, 8_536_064.0);
        assert_eq!(c.classic, 553_779_200.0);

        assert!(cost_model(-1.0, 1.0, 1.0, 1.0, |_, _| 0.0).is_err());
    }

    #[test]
    fn cumulative_curve_accounting() {
        let c = curve("x".into(), 2.0, vec![0.5, 0.25]);
        assert_eq!(c.cumulative_seconds, vec![2.5, 2.75]);
    }
}
