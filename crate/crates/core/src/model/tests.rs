use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::memory::{MemoryBank, RetrievalConfig, RotationState};

fn model(enc: PositionEncoding) -> Model {
    let mut cfg = ModelConfig::toy(40, enc);
    cfg.head_dim = 8;
    cfg.max_train_len = 16;
    Model::new(Weights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(21)).unwrap()).unwrap()
}

fn tokens(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..40)).collect()
}

fn retr(m: &Model, k: usize) -> RetrievalConfig {
    let c = m.config();
    RetrievalConfig::all_layers(c.n_layers, k, 8, c.position_encoding.memory_mode())
}

#[test]
fn no_op_configurations_are_bitwise_identical() {
    for enc in [PositionEncoding::Alibi, PositionEncoding::Rope] {
        let m = model(enc);
        let doc = tokens(40, 1);
        let prompt = tokens(10, 2);
        let plain = m.forward(&prompt, None, &retr(&m, 4), None).unwrap().logits;
        let bank = m.generate_memories(&doc, 8, 16).unwrap();
        let k0 = m.forward(&prompt, Some(&bank), &retr(&m, 0), None).unwrap().logits;
        let no_layers = m.forward(&prompt, Some(&bank), &retr(&m, 4).with_layers([]), None).unwrap().logits;
        let c = m.config();
        let empty = MemoryBank::new(c.n_layers, c.n_heads, c.head_dim, RotationState::Unrotated);
        let empty_bank = m.forward(&prompt, Some(&empty), &retr(&m, 4), None).unwrap().logits;
        assert_eq!(plain, k0);
        assert_eq!(plain, no_layers);
        assert_eq!(plain, empty_bank);
        let with = m.forward(&prompt, Some(&bank), &retr(&m, 4), None).unwrap().logits;
        assert_ne!(plain, with);
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    for enc in [PositionEncoding::Alibi, PositionEncoding::Rope] {
        let m = model(enc);
        let toks = tokens(14, 3);
        let bank = m.generate_memories(&tokens(30, 4), 8, 16).unwrap();
        let rc = retr(&m, 2);
        let full = m.forward(&toks, Some(&bank), &rc, None).unwrap().logits;
        let mut cache = m.new_cache();
        let head = m.forward(&toks[..5], Some(&bank), &rc, Some(&mut cache)).unwrap().logits;
        let mut rows = vec![head];
        for &t in &toks[5..] {
            rows.push(m.forward(&[t], Some(&bank), &rc, Some(&mut cache)).unwrap().logits);
        }
        assert_eq!(cache.len(), toks.len());
        let stacked =
            ndarray::concatenate(ndarray::Axis(0), &rows.iter().map(|r| r.view()).collect::<Vec<_>>()).unwrap();
        let diff = full.iter().zip(&stacked).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "{enc:?}: {diff}");
    }
}

#[test]
fn truncating_the_cache_allows_recomputing_a_step() {
    let m = model(PositionEncoding::Rope);
    let toks = tokens(6, 5);
    let rc = retr(&m, 0);
    let mut cache = m.new_cache();
    m.forward(&toks, None, &rc, Some(&mut cache)).unwrap();
    let first = m.forward(&[3], None, &rc, Some(&mut cache)).unwrap().logits;
    cache.truncate(6);
    let again = m.forward(&[3], None, &rc, Some(&mut cache)).unwrap().logits;
    assert_eq!(first, again);
}

#[test]
fn short_documents_cache_in_a_single_pass() {
    for enc in [PositionEncoding::Alibi, PositionEncoding::Rope] {
        let m = model(enc);
        let doc = tokens(16, 6);
        let bank = m.generate_memories(&doc, 4, 16).unwrap();
        let trace = m.forward(&doc, None, &retr(&m, 0), None).unwrap();
        assert_eq!(bank.n_tokens(), 16);
        for (li, kv) in trace.layer_kv.iter().enumerate() {
            for h in 0..m.config().n_heads {
                let bk = bank.keys(li, h).unwrap();
                let bv = bank.values(li, h).unwrap();
                let dk = bk
                    .iter()
                    .zip(kv.keys.index_axis(ndarray::Axis(0), h))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                let dv = bv
                    .iter()
                    .zip(kv.values.index_axis(ndarray::Axis(0), h))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                assert!(dk < 1e-6 && dv < 1e-6);
            }
        }
    }
}

#[test]
fn strided_bank_covers_the_document_in_order() {
    let m = model(PositionEncoding::Alibi);
    let doc = tokens(61, 7);
    for stride in [1, 5, 16] {
        let bank = m.generate_memories(&doc, stride, 16).unwrap();
        assert_eq!(bank.token_ids(), doc.as_slice());
        assert_eq!(bank.original_positions(), (0..61).collect::<Vec<u32>>().as_slice());
        // a later window's tokens equal a direct pass over that window
        let plan = window_plan(doc.len(), stride, 16).unwrap();
        let w = plan.last().unwrap();
        let trace = m.forward(&doc[w.input_range()], None, &retr(&m, 0), None).unwrap();
        let last = trace.layer_kv[1].keys.index_axis(ndarray::Axis(0), 0);
        let bk = bank.keys(1, 0).unwrap();
        assert_eq!(bk.row(60), last.row(last.nrows() - 1));
    }
    assert!(m.generate_memories(&doc, 17, 16).is_err());
    assert!(m.generate_memories(&doc, 8, 33).is_err());
}

#[test]
fn forward_is_deterministic() {
    let m = model(PositionEncoding::Rope);
    let doc = tokens(50, 8);
    let a = m.generate_memories(&doc, 8, 16).unwrap();
    let b = m.generate_memories(&doc, 8, 16).unwrap();
    assert_eq!(a, b);
    let p = tokens(5, 9);
    let rc = retr(&m, 3);
    assert_eq!(m.forward(&p, Some(&a), &rc, None).unwrap().logits, m.forward(&p, Some(&b), &rc, None).unwrap().logits);
}

#[test]
fn unit_interpolation_changes_nothing() {
    let m = model(PositionEncoding::Alibi);
    let p = tokens(12, 10);
    let rc = retr(&m, 0);
    let scaled = m.with_position_interpolation(1.0).unwrap();
    assert_eq!(m.forward(&p, None, &rc, None).unwrap().logits, scaled.forward(&p, None, &rc, None).unwrap().logits);
    assert!(m.with_position_interpolation(0.0).is_err());
}

#[test]
fn out_of_vocabulary_and_foreign_banks_are_rejected() {
    let m = model(PositionEncoding::Alibi);
    let rc = retr(&m, 2);
    assert!(matches!(m.forward(&[40], None, &rc, None), Err(crate::Error::Dimension(_))));
    let other = MemoryBank::new(1, 1, 8, RotationState::Unrotated);
    assert!(m.forward(&[1, 2], Some(&other), &rc, None).is_err());
    assert!(matches!(m.forward(&[1], None, &rc.with_layers([7]), None), Err(crate::Error::InvalidLayer { .. })));
}
