use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::memory::RetrievalConfig;
use crate::model::{Model, PositionEncoding};

fn micro(enc: PositionEncoding) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 1,
        head_dim: 4,
        vocab_size: 11,
        max_train_len: 8,
        position_encoding: enc,
        ffn_mult: 2.0,
        rope_base: 10000.0,
        alibi_max_bias: 8.0,
    }
}

fn random_batch(cfg: &ModelConfig, b: usize, t: usize, rng: &mut impl Rng) -> Batch {
    let v = cfg.vocab_size as u32;
    let mut tok = |n| (0..n).map(|_| rng.random_range(0..v)).collect::<Vec<_>>();
    let inputs = (0..b).map(|_| tok(t)).collect();
    let targets = (0..b).map(|_| tok(t)).collect();
    let mask = (0..b).map(|i| (0..t).map(|j| (i + j) % 3 != 1).collect()).collect();
    Batch { inputs, targets, mask }
}

fn init_f64(cfg: &ModelConfig, seed: u64) -> Weights<f64> {
    // larger than the training init so every term of the gradient matters
    let mut w = Weights::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for s in w.slices_mut() {
        for x in s.iter_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    w
}

fn grad_check(cfg: ModelConfig) {
    let enc = cfg.position_encoding;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch = random_batch(&cfg, 2, 6, &mut rng);
    let w = init_f64(&cfg, 3);
    let (_, g) = loss_and_grad(&w, &batch).unwrap();
    let sizes: Vec<usize> = w.slices().iter().map(|s| s.len()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let ti = rng.random_range(0..sizes.len());
        let i = rng.random_range(0..sizes[ti]);
        let eval = |delta: f64| {
            let mut p = w.clone();
            p.slices_mut()[ti][i] += delta;
            batch_loss(&p, &batch).unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = g.slices()[ti][i];
        let denom = analytic.abs().max(numeric.abs());
        let err = if denom < 1e-9 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / denom };
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "{enc:?}: worst relative error {worst:e}");
}

#[test]
fn gradients_match_finite_differences_alibi() {
    grad_check(micro(PositionEncoding::Alibi));
}

#[test]
fn gradients_match_with_several_layers_and_heads() {
    for enc in [PositionEncoding::Alibi, PositionEncoding::Rope] {
        grad_check(ModelConfig { n_layers: 2, n_heads: 3, ..micro(enc) });
    }
}

#[test]
fn gradients_match_finite_differences_rope() {
    grad_check(micro(PositionEncoding::Rope));
}

#[test]
fn trainer_forward_matches_inference_forward() {
    for enc in [PositionEncoding::Alibi, PositionEncoding::Rope] {
        let mut cfg = ModelConfig::toy(23, enc);
        cfg.n_layers = 2;
        cfg.head_dim = 8;
        cfg.max_train_len = 16;
        let w = Weights::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seqs: Vec<Vec<u32>> = (0..3).map(|_| (0..16).map(|_| rng.random_range(0..23)).collect()).collect();
        let train = batch_logits(&w, &seqs).unwrap();
        let model = Model::new(w).unwrap();
        let rc = RetrievalConfig::all_layers(2, 0, 16, enc.memory_mode());
        for (b, s) in seqs.iter().enumerate() {
            let inf = model.forward(s, None, &rc, None).unwrap().logits;
            for t in 0..16 {
                for v in 0..23 {
                    let diff = (inf[[t, v]] - train[[b * 16 + t, v]]).abs();
                    assert!(diff < 1e-4, "{enc:?} seq {b} pos {t}: {diff}");
                }
            }
        }
    }
}

#[test]
fn batch_rejects_overlong_sequences() {
    let cfg = micro(PositionEncoding::Alibi);
    let w = Weights::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let batch = random_batch(&cfg, 1, 9, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(batch_loss(&w, &batch), Err(Error::Contract(_))));
}

#[test]
fn char_lm_beats_uniform() {
    let corpus = procedural_corpus(20_000, &mut ChaCha8Rng::seed_from_u64(2));
    let task = TaskSpec::CharLm { corpus };
    let mut cfg = ModelConfig::toy(task.vocab_size(), PositionEncoding::Alibi);
    cfg.n_layers = 1;
    cfg.head_dim = 8;
    cfg.max_train_len = 32;
    let opts = TrainOptions { max_steps: 60, eval_every: 30, batch_size: 8, eval_batches: 2, ..Default::default() };
    let report = train_toy_with(&cfg, &task, &opts, 0).unwrap();
    assert!(report.validation_loss < report.chance);
}

#[test]
fn vocab_mismatch_is_config_error() {
    let task = TaskSpec::KvLookup { n_keys: 8, n_values: 4 };
    let cfg = ModelConfig::toy(10, PositionEncoding::Alibi);
    assert!(matches!(train_toy(&cfg, &task, 0), Err(Error::Config(_))));
}

#[test]
fn schedule_warms_up_then_decays() {
    let o = TrainOptions { max_steps: 1000, warmup_steps: 100, learning_rate: 1.0, ..Default::default() };
    assert!((schedule(&o, 99) - 1.0).abs() < 1e-12);
    assert!(schedule(&o, 10) < schedule(&o, 50));
    assert!((schedule(&o, 1000) - 0.1).abs() < 1e-12);
}
