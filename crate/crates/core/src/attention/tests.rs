use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

struct Case {
    q: Array2<f32>,
    lk: Array2<f32>,
    lv: Array2<f32>,
    mk: Array3<f32>,
    mv: Array3<f32>,
    mask: Array2<bool>,
    qpos: Vec<usize>,
    kpos: Vec<usize>,
}

fn case(rng: &mut impl Rng, q: usize, l: usize, k: usize, d: usize) -> Case {
    let mut r = |shape: usize| (0..shape).map(|_| rng.random_range(-1.5f32..1.5)).collect::<Vec<_>>();
    let q_arr = Array2::from_shape_vec((q, d), r(q * d)).unwrap();
    let lk = Array2::from_shape_vec((l, d), r(l * d)).unwrap();
    let lv = Array2::from_shape_vec((l, d), r(l * d)).unwrap();
    let mk = Array3::from_shape_vec((q, k, d), r(q * k * d)).unwrap();
    let mv = Array3::from_shape_vec((q, k, d), r(q * k * d)).unwrap();
    Case {
        q: q_arr,
        lk,
        lv,
        mk,
        mv,
        mask: Array2::from_elem((q, k), true),
        qpos: (l - q..l).collect(),
        kpos: (0..l).collect(),
    }
}

fn run(c: &Case, bias: PositionBias) -> AttentionOutput {
    extended_attention(&AttentionInputs {
        queries: c.q.view(),
        memory_queries: None,
        local_keys: c.lk.view(),
        local_values: c.lv.view(),
        memory_keys: c.mk.view(),
        memory_values: c.mv.view(),
        retrieval_mask: c.mask.view(),
        bias,
        query_positions: &c.qpos,
        local_key_positions: &c.kpos,
    })
    .unwrap()
}

/// Textbook attention in f64 over an explicit list of (key, value, bias).
fn dense(q: &[f32], keys: &[(Vec<f32>, Vec<f32>, f64)]) -> Vec<f64> {
    let d = q.len();
    let logits: Vec<f64> = keys
        .iter()
        .map(|(k, _, b)| q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (d as f64).sqrt() + b)
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let mut out = vec![0.0; d];
    for (w, (_, v, _)) in e.iter().zip(keys) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w / s * x as f64;
        }
    }
    out
}

fn oracle(c: &Case, slope: f64) -> Array2<f64> {
    let (q, d) = c.q.dim();
    let mut out = Array2::zeros((q, d));
    for i in 0..q {
        let mut keys = Vec::new();
        for j in 0..c.mk.shape()[1] {
            if c.mask[[i, j]] {
                keys.push((
                    c.mk.slice(ndarray::s![i, j, ..]).to_vec(),
                    c.mv.slice(ndarray::s![i, j, ..]).to_vec(),
                    -slope,
                ));
            }
        }
        for j in 0..c.lk.nrows() {
            if c.kpos[j] <= c.qpos[i] {
                let dist = (c.qpos[i] - c.kpos[j]) as f64;
                keys.push((c.lk.row(j).to_vec(), c.lv.row(j).to_vec(), -slope * dist));
            }
        }
        for (o, v) in out.row_mut(i).iter_mut().zip(dense(c.q.row(i).as_slice().unwrap(), &keys)) {
            *o = v;
        }
    }
    out
}

fn max_diff(a: &Array2<f32>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

#[test]
fn without_memories_matches_dense_causal_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = case(&mut rng, 6, 6, 0, 8);
    assert!(max_diff(&run(&c, PositionBias::None).output, &oracle(&c, 0.0)) < 1e-5);
    assert!(max_diff(&run(&c, PositionBias::alibi(0.5)).output, &oracle(&c, 0.5)) < 1e-5);
}

#[test]
fn memories_join_the_softmax_like_extra_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (q, l, k) in [(1, 5, 3), (4, 4, 2), (3, 7, 5)] {
        let c = case(&mut rng, q, l, k, 6);
        assert!(max_diff(&run(&c, PositionBias::None).output, &oracle(&c, 0.0)) < 1e-5);
        assert!(max_diff(&run(&c, PositionBias::alibi(0.25)).output, &oracle(&c, 0.25)) < 1e-5);
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let d = 4;
    let c = Case {
        q: Array2::from_elem((1, d), 0.3),
        lk: Array2::from_elem((3, d), 0.7),
        lv: Array2::zeros((3, d)),
        mk: Array3::from_elem((1, 2, d), 0.7),
        mv: Array3::zeros((1, 2, d)),
        mask: Array2::from_elem((1, 2), true),
        qpos: vec![2],
        kpos: vec![0, 1, 2],
    };
    let w = run(&c, PositionBias::None).weights;
    assert!(w.iter().all(|&x| (x - 0.2).abs() < 1e-6));
}

#[test]
fn causal_mask_examples() {
    let m = causal_mask(3, 3, 0).unwrap();
    assert_eq!(m, ndarray::arr2(&[[true, false, false], [true, true, false], [true, true, true]]));
    let m = causal_mask(1, 4, 3).unwrap();
    assert!(m.iter().all(|&v| v));
    assert!(causal_mask(2, 3, 2).is_err());
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = case(&mut rng, 2, 3, 1, 4);
    let bad = Array2::<f32>::zeros((3, 5));
    let r = extended_attention(&AttentionInputs {
        queries: c.q.view(),
        memory_queries: None,
        local_keys: bad.view(),
        local_values: c.lv.view(),
        memory_keys: c.mk.view(),
        memory_values: c.mv.view(),
        retrieval_mask: c.mask.view(),
        bias: PositionBias::None,
        query_positions: &c.qpos,
        local_key_positions: &c.kpos,
    });
    assert!(matches!(r, Err(crate::Error::Dimension(_))));
}

#[test]
fn rotation_keeps_norm_and_position_zero_is_identity() {
    let p = RopeParams::new(10000.0, 8).unwrap();
    let inv: Vec<f32> = p.inv_freq();
    let x: Vec<f32> = (0..8).map(|i| i as f32 * 0.3 - 1.0).collect();
    let mut y = x.clone();
    rotate_row(&mut y, 0.0, &inv);
    assert_eq!(x, y);
    rotate_row(&mut y, 17.0, &inv);
    let n = |v: &[f32]| v.iter().map(|a| a * a).sum::<f32>();
    assert!((n(&x) - n(&y)).abs() < 1e-4);
    assert!(RopeParams::new(10000.0, 5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rows_sum_to_one_and_hidden_columns_get_nothing(
        seed in any::<u64>(), q in 1usize..5, extra in 0usize..5, k in 0usize..5, slope in 0.0f32..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = case(&mut rng, q, q + extra, k, 4);
        c.mask.iter_mut().for_each(|m| *m = rng.random_bool(0.6));
        let w = run(&c, PositionBias::alibi(slope)).weights;
        for i in 0..q {
            prop_assert!((w.row(i).sum() - 1.0).abs() < 1e-6);
            for j in 0..k {
                if !c.mask[[i, j]] {
                    prop_assert_eq!(w[[i, j]], 0.0);
                }
            }
            for j in 0..c.lk.nrows() {
                if c.kpos[j] > c.qpos[i] {
                    prop_assert_eq!(w[[i, k + j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn rotary_scores_depend_only_on_offset(m in 0u32..200, n in 0u32..200, shift in 0u32..500) {
        let p = RopeParams::new(10000.0, 8).unwrap();
        let inv: Vec<f64> = p.inv_freq();
        let q: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let k: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let score = |a: f64, b: f64| {
            let (mut qa, mut kb) = (q.clone(), k.clone());
            rotate_row(&mut qa, a, &inv);
            rotate_row(&mut kb, b, &inv);
            qa.iter().zip(&kb).map(|(x, y)| x * y).sum::<f64>()
        };
        let base = score(m as f64, n as f64);
        let moved = score((m + shift) as f64, (n + shift) as f64);
        prop_assert!((base - moved).abs() < 1e-9);
    }
}
