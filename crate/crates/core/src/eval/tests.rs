use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::memory::RetrievalConfig;
use crate::model::{Model, ModelConfig, PositionEncoding, Weights};
use crate::train::KvVocab;

fn small(enc: PositionEncoding, vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(vocab, enc);
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.head_dim = 8;
    cfg.max_train_len = 16;
    cfg
}

fn random_model(enc: PositionEncoding, vocab: usize) -> Model {
    let cfg = small(enc, vocab);
    Model::new(Weights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap()).unwrap()
}

fn corpus(n: usize, vocab: u32) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn uniform_model_has_vocab_perplexity() {
    let cfg = small(PositionEncoding::Alibi, 29);
    let model = Model::new(Weights::zeros(&cfg).unwrap()).unwrap();
    let retr = RetrievalConfig::all_layers(2, 3, 8, cfg.position_encoding.memory_mode());
    let text = corpus(300, 29);
    for method in [
        PerplexityMethod::Naive,
        PerplexityMethod::NaiveInterpolated { alpha: 2.0 },
        PerplexityMethod::Truncate,
        PerplexityMethod::Extended,
    ] {
        let report = perplexity_eval(&model, &text, method, &[8, 16, 32], 16, &retr).unwrap();
        for row in &report.rows {
            assert!((row.perplexity.unwrap() - 29.0).abs() < 1e-6, "{method} {row:?}");
        }
    }
}

#[test]
fn extended_with_k0_matches_truncate() {
    for enc in [PositionEncoding::Alibi, PositionEncoding::Rope] {
        let model = random_model(enc, 31);
        let text = corpus(400, 31);
        let retr = RetrievalConfig::all_layers(2, 0, 8, enc.memory_mode());
        let lengths = [8, 17, 40, 96];
        let t = perplexity_eval(&model, &text, PerplexityMethod::Truncate, &lengths, 24, &retr).unwrap();
        let e = perplexity_eval(&model, &text, PerplexityMethod::Extended, &lengths, 24, &retr).unwrap();
        for (a, b) in t.rows.iter().zip(&e.rows) {
            assert!((a.mean_nll.unwrap() - b.mean_nll.unwrap()).abs() < 1e-6);
        }
        // with retrieval, short inputs have no memories and still agree
        let retr = retr.with_k(3);
        let e = perplexity_eval(&model, &text, PerplexityMethod::Extended, &[8, 17], 24, &retr).unwrap();
        for (a, b) in t.rows.iter().zip(&e.rows) {
            assert_eq!(a.mean_nll, b.mean_nll);
        }
    }
}

#[test]
fn naive_is_na_beyond_window_and_equals_truncate_inside_n() {
    let model = random_model(PositionEncoding::Alibi, 31);
    let text = corpus(400, 31);
    let retr = RetrievalConfig::all_layers(2, 2, 8, PositionEncoding::Alibi.memory_mode());
    let naive = perplexity_eval(&model, &text, PerplexityMethod::Naive, &[10, 17, 32, 33, 64], 32, &retr).unwrap();
    let trunc = perplexity_eval(&model, &text, PerplexityMethod::Truncate, &[10, 17], 32, &retr).unwrap();
    assert_eq!(naive.rows[0].perplexity, trunc.rows[0].perplexity);
    assert_eq!(naive.rows[1].perplexity, trunc.rows[1].perplexity);
    assert!(naive.rows[3].perplexity.is_none());
    assert!(naive.rows[4].perplexity.is_none());
    assert!(naive.table().contains("n/a"));
    let interp =
        perplexity_eval(&model, &text, PerplexityMethod::NaiveInterpolated { alpha: 2.0 }, &[64], 32, &retr).unwrap();
    assert!(interp.rows[0].perplexity.is_some());
}

#[test]
fn perplexity_rejects_bad_arguments() {
    let model = random_model(PositionEncoding::Alibi, 31);
    let text = corpus(100, 31);
    let retr = RetrievalConfig::all_layers(2, 2, 8, PositionEncoding::Alibi.memory_mode());
    assert!(perplexity_eval(&model, &text, PerplexityMethod::Truncate, &[32, 16], 8, &retr).is_err());
    assert!(perplexity_eval(&model, &text, PerplexityMethod::Truncate, &[500], 8, &retr).is_err());
    assert!(perplexity_eval(&model, &text, PerplexityMethod::Truncate, &[16], 0, &retr).is_err());
}

fn lookup_records(n_per_length: usize) -> (KvVocab, Vec<EvalRecord>) {
    let vocab = KvVocab::new(60, 8);
    let spec = KvDatasetSpec {
        vocab,
        doc_lengths: vec![32, 64],
        records_per_length: n_per_length,
        min_distance: 16,
        max_appearances: 3,
    };
    (vocab, kv_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap())
}

#[test]
fn heatmap_counts_sum_to_evaluated_records() {
    let (vocab, mut records) = lookup_records(6);
    records[3].answer.clear();
    let model = random_model(PositionEncoding::Alibi, vocab.vocab_size());
    let mut retr = RetrievalConfig::all_layers(2, 2, 8, PositionEncoding::Alibi.memory_mode());
    retr.special_token_ids = vocab.special_tokens();
    for method in [RetrievalMethod::InContext, RetrievalMethod::Truncate, RetrievalMethod::Extended] {
        let report = retrieval_bench(&model, &records, method, &retr, &AppearanceBuckets::default()).unwrap();
        assert_eq!(report.skipped, 1);
        let cells: usize = report.heatmap.values().flat_map(|m| m.values()).map(|t| t.total).sum();
        assert_eq!(cells, records.len() - 1);
        assert_eq!(report.by_length.values().map(|t| t.total).sum::<usize>(), records.len() - 1);
        assert_eq!(report.outcomes.len(), records.len() - 1);
        let cited = report.outcomes.iter().any(|o| !o.citations.is_empty());
        assert_eq!(cited, method == RetrievalMethod::Extended);
    }
}

#[test]
fn prepare_shapes_inputs() {
    let (vocab, records) = lookup_records(1);
    let model = random_model(PositionEncoding::Rope, vocab.vocab_size());
    let mut retr = RetrievalConfig::all_layers(2, 2, 8, PositionEncoding::Rope.memory_mode());
    retr.special_token_ids = vocab.special_tokens();
    let r = &records[1];
    let (p, b) = prepare(&model, r, RetrievalMethod::InContext, &retr).unwrap();
    assert_eq!(p.len(), r.document.len() + r.question.len());
    assert!(b.is_none());
    let (p, _) = prepare(&model, r, RetrievalMethod::Truncate, &retr).unwrap();
    assert_eq!(p.len(), 16);
    assert!(p.ends_with(&r.question));
    let (p, b) = prepare(&model, r, RetrievalMethod::Extended, &retr).unwrap();
    assert_eq!(p, [&[crate::train::BOS], r.question.as_slice()].concat());
    // the leading <bos> is pruned from the bank
    assert_eq!(b.unwrap().n_tokens(), r.document.len() - 1);
}

#[test]
fn ablation_runs_every_subset() {
    let (vocab, records) = lookup_records(2);
    let model = random_model(PositionEncoding::Alibi, vocab.vocab_size());
    let retr = RetrievalConfig::all_layers(2, 2, 8, PositionEncoding::Alibi.memory_mode());
    let rows = layer_ablation(&model, &records, &retr).unwrap();
    assert_eq!(rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), ["all", "last_half", "last_third"]);
    assert!(rows.iter().all(|r| r.accuracy.total == records.len()));
}

#[test]
fn nll_by_k_reports_each_budget() {
    let (vocab, records) = lookup_records(2);
    let model = random_model(PositionEncoding::Alibi, vocab.vocab_size());
    let retr = RetrievalConfig::all_layers(2, 1, 8, PositionEncoding::Alibi.memory_mode());
    let rows = answer_nll_by_k(&model, &records, &retr, &[0, 1, 4]).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [0, 1, 4]);
    assert!(rows.iter().all(|r| r.1.is_finite() && r.1 > 0.0));
}

#[test]
fn timing_curves_are_consistent() {
    let model = random_model(PositionEncoding::Alibi, 31);
    let doc = corpus(8 * 32, 31);
    let queries: Vec<Vec<u32>> = (0..4).map(|i| vec![i + 1, i + 2, i + 3]).collect();
    let retr = RetrievalConfig::all_layers(2, 2, 16, PositionEncoding::Alibi.memory_mode());
    let opts = TimingOptions { window: 32, strides: vec![16, 32], repetitions: 3 };
    let report = timing_bench(&model, &doc, &queries, &retr, &opts).unwrap();
    assert_eq!(report.curves.len(), 4);
    for c in &report.curves {
        assert_eq!(c.cumulative_seconds.len(), 4);
        assert!(c.cumulative_seconds.windows(2).all(|w| w[0] <= w[1]));
        assert!(c.cumulative_seconds[0] >= c.per_query_seconds[0]);
    }
    let w16 = report.curve("extended@16").unwrap().cache_windows.unwrap();
    let w32 = report.curve("extended@32").unwrap().cache_windows.unwrap();
    assert_eq!((w16, w32), (15, 8));
    assert!(report.table().lines().count() == 5);
}
