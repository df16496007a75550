mod common;

use common::*;
use fedbot_core::tensor::Tensor;
use fedbot_core::tokenizer::{TokenSequence, END, PAD, START};
use fedbot_core::transformer::*;
use fedbot_core::weights::ModelWeights;
use proptest::prelude::*;

fn tiny(vocab: usize, layers: usize) -> TransformerConfig {
    TransformerConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: layers,
        d_ff: 16,
        dropout: 0.0,
        attention_dropout: 0.0,
        activation_dropout: 0.0,
        max_len: 6,
        vocab_size: vocab,
    }
}

fn seq(content: &[u32], max_len: usize) -> TokenSequence {
    TokenSequence::frame(content, max_len)
}

#[test]
fn single_key_attention_returns_value() {
    let mut rng = rng(1);
    let q = random_tensor(&mut rng, &[1, 3], 1.0);
    let k = random_tensor(&mut rng, &[1, 3], 1.0);
    let v = random_tensor(&mut rng, &[1, 5], 1.0);
    assert_eq!(attention(&q, &k, &v, None).unwrap(), v);
}

#[test]
fn identical_keys_give_mean_of_values() {
    let mut rng = rng(2);
    let q = random_tensor(&mut rng, &[2, 3], 1.0);
    let k = Tensor::from_f64([4, 3], &[0.3, -0.1, 0.5].repeat(4)).unwrap();
    let v = random_tensor(&mut rng, &[4, 2], 1.0);
    let out = attention(&q, &k, &v, None).unwrap();
    for row in out.data().chunks(2) {
        for (c, &x) in row.iter().enumerate() {
            let mean = (0..4).map(|r| v.data()[r * 2 + c]).sum::<f64>() / 4.0;
            assert!((x - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn sharp_orthonormal_attention_selects_matching_row() {
    // With scale s on orthonormal rows, off-target weights are
    // exp(-s²/√d) relative to the target: at s = 50, d = 3 that is e^-1443.
    let s = 50.0;
    let mut basis = vec![0.0; 9];
    for i in 0..3 {
        basis[i * 3 + i] = s;
    }
    let qk = Tensor::<f64>::from_f64([3, 3], &basis).unwrap();
    let mut rng = rng(3);
    let v = random_tensor(&mut rng, &[3, 4], 1.0);
    let out = attention(&qk, &qk, &v, None).unwrap();
    for (a, b) in out.data().iter().zip(v.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn attention_mismatched_dk_is_dimension_error() {
    let q = Tensor::<f64>::zeros([2, 3]);
    let k = Tensor::zeros([2, 4]);
    let v = Tensor::zeros([2, 4]);
    assert!(matches!(
        attention(&q, &k, &v, None),
        Err(ModelError::Tensor(_))
    ));
}

fn eye(d: usize) -> Tensor<f64> {
    let mut e = vec![0.0; d * d];
    for i in 0..d {
        e[i * d + i] = 1.0;
    }
    Tensor::from_f64([d, d], &e).unwrap()
}

#[test]
fn one_head_identity_projections_is_plain_attention() {
    let mut rng = rng(4);
    let x = random_tensor(&mut rng, &[1, 3, 4], 1.0);
    let w = AttentionWeights {
        wq: eye(4),
        bq: Tensor::zeros([4]),
        wk: eye(4),
        bk: Tensor::zeros([4]),
        wv: eye(4),
        bv: Tensor::zeros([4]),
        wo: eye(4),
        bo: Tensor::zeros([4]),
    };
    let mha = multi_head_attention(&x, &x, &w, 1, None).unwrap();
    let x2 = x.reshape([3, 4]).unwrap();
    let plain = attention(&x2, &x2, &x2, None).unwrap();
    for (a, b) in mha.data().iter().zip(plain.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn random_attention_weights(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> AttentionWeights<f64> {
    AttentionWeights {
        wq: random_tensor(rng, &[d, d], 1.0),
        bq: random_tensor(rng, &[d], 0.5),
        wk: random_tensor(rng, &[d, d], 1.0),
        bk: random_tensor(rng, &[d], 0.5),
        wv: random_tensor(rng, &[d, d], 1.0),
        bv: random_tensor(rng, &[d], 0.5),
        wo: random_tensor(rng, &[d, d], 1.0),
        bo: random_tensor(rng, &[d], 0.5),
    }
}

fn columns(t: &Tensor<f64>, from: usize, to: usize) -> Tensor<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let data: Vec<f64> = (0..r)
        .flat_map(|i| (from..to).map(move |j| (i, j)))
        .map(|(i, j)| t.data()[i * c + j])
        .collect();
    Tensor::new(vec![r, to - from], data).unwrap()
}

fn add_row(t: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let c = t.shape()[1];
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + b[i % c])
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn two_heads_match_hand_composed_heads() {
    let mut rng = rng(5);
    let x = random_tensor(&mut rng, &[2, 4], 1.0);
    let w = random_attention_weights(&mut rng, 4);

    let q = add_row(&x.matmul(&w.wq).unwrap(), w.bq.data());
    let k = add_row(&x.matmul(&w.wk).unwrap(), w.bk.data());
    let v = add_row(&x.matmul(&w.wv).unwrap(), w.bv.data());
    let mut concat = vec![0.0; 8];
    for h in 0..2 {
        let head = attention(
            &columns(&q, 2 * h, 2 * h + 2),
            &columns(&k, 2 * h, 2 * h + 2),
            &columns(&v, 2 * h, 2 * h + 2),
            None,
        )
        .unwrap();
        for r in 0..2 {
            for c in 0..2 {
                concat[r * 4 + 2 * h + c] = head.data()[r * 2 + c];
            }
        }
    }
    let expected = add_row(
        &Tensor::new(vec![2, 4], concat)
            .unwrap()
            .matmul(&w.wo)
            .unwrap(),
        w.bo.data(),
    );

    let got = multi_head_attention(
        &x.reshape([1, 2, 4]).unwrap(),
        &x.reshape([1, 2, 4]).unwrap(),
        &w,
        2,
        None,
    )
    .unwrap();
    for (a, b) in got.data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mha_shape_and_divisibility() {
    let mut rng = rng(6);
    let w = random_attention_weights(&mut rng, 6);
    let xq = random_tensor(&mut rng, &[2, 3, 6], 1.0);
    let xkv = random_tensor(&mut rng, &[2, 5, 6], 1.0);
    for h in [1, 2, 3, 6] {
        assert_eq!(
            multi_head_attention(&xq, &xkv, &w, h, None)
                .unwrap()
                .shape(),
            &[2, 3, 6]
        );
    }
    assert!(matches!(
        multi_head_attention(&xq, &xkv, &w, 4, None),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn forward_shape() {
    let cfg = tiny(12, 1);
    let w = init_weights::<f32>(&cfg, 1).unwrap();
    let src = vec![seq(&[5, 6], 6), seq(&[7], 6), seq(&[4, 4, 4, 4], 6)];
    let logits = forward(&w, &cfg, &src, &src, false, 0).unwrap();
    assert_eq!(logits.shape(), &[3, 6, 12]);
}

#[test]
fn forward_rejects_out_of_range_ids() {
    let cfg = tiny(12, 1);
    let w = init_weights::<f32>(&cfg, 1).unwrap();
    let bad = vec![seq(&[12], 6)];
    assert!(matches!(
        forward(&w, &cfg, &bad, &bad, false, 0),
        Err(ModelError::Tensor(_))
    ));
}

#[test]
fn padded_source_positions_do_not_affect_logits() {
    let cfg = tiny(12, 2);
    let w = init_weights::<f64>(&cfg, 2).unwrap();
    let src = seq(&[5, 6], 6);
    let tgt = seq(&[7, 8], 6);
    let base = forward(
        &w,
        &cfg,
        std::slice::from_ref(&src),
        std::slice::from_ref(&tgt),
        false,
        0,
    )
    .unwrap();
    let mut changed = src.clone();
    changed.ids[5] = 9; // beyond true_length
    let other = forward(&w, &cfg, &[changed], &[tgt], false, 0).unwrap();
    for (a, b) in base.data().iter().zip(other.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn decoder_is_causal() {
    let cfg = tiny(12, 2);
    let w = init_weights::<f64>(&cfg, 3).unwrap();
    let src = seq(&[5, 6, 7], 6);
    let tgt = seq(&[8, 9, 10, 11], 6);
    let base = forward(
        &w,
        &cfg,
        std::slice::from_ref(&src),
        std::slice::from_ref(&tgt),
        false,
        0,
    )
    .unwrap();
    for j in 1..6 {
        let mut t2 = tgt.clone();
        t2.ids[j] = if t2.ids[j] == 4 { 5 } else { 4 };
        let other = forward(&w, &cfg, std::slice::from_ref(&src), &[t2], false, 0).unwrap();
        for pos in 0..j {
            for v in 0..12 {
                let i = pos * 12 + v;
                assert!(
                    (base.data()[i] - other.data()[i]).abs() < 1e-6,
                    "pos {pos} changed when editing {j}"
                );
            }
        }
    }
}

#[test]
fn forward_without_dropout_is_deterministic_and_dropout_is_seeded() {
    let cfg = TransformerConfig {
        dropout: 0.3,
        attention_dropout: 0.3,
        activation_dropout: 0.3,
        ..tiny(12, 1)
    };
    let w = init_weights::<f32>(&cfg, 4).unwrap();
    let src = vec![seq(&[5, 6], 6)];
    let a = forward(&w, &cfg, &src, &src, false, 1).unwrap();
    let b = forward(&w, &cfg, &src, &src, false, 2).unwrap();
    assert_eq!(a.data(), b.data());
    let t1 = forward(&w, &cfg, &src, &src, true, 1).unwrap();
    let t1b = forward(&w, &cfg, &src, &src, true, 1).unwrap();
    let t2 = forward(&w, &cfg, &src, &src, true, 2).unwrap();
    assert_eq!(t1.data(), t1b.data());
    assert_ne!(t1.data(), t2.data());
    assert_ne!(t1.data(), a.data());
}

/// Permutes head blocks of one attention block's projections.
fn permute_heads(w: &mut ModelWeights<f64>, prefix: &str, perm: &[usize], d: usize) {
    let dh = d / perm.len();
    let col_perm = |t: &Tensor<f64>| {
        let rows = t.len() / d;
        let mut out = t.data().to_vec();
        for r in 0..rows {
            for (new_h, &old_h) in perm.iter().enumerate() {
                for c in 0..dh {
                    out[r * d + new_h * dh + c] = t.data()[r * d + old_h * dh + c];
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out).unwrap()
    };
    for n in ["wq", "wk", "wv", "bq", "bk", "bv"] {
        let name = format!("{prefix}.{n}");
        let t = col_perm(w.get(&name).unwrap());
        *w.get_mut(&name).unwrap() = t;
    }
    let name = format!("{prefix}.wo");
    let wo = w.get(&name).unwrap().clone();
    let mut out = wo.data().to_vec();
    for (new_h, &old_h) in perm.iter().enumerate() {
        for r in 0..dh {
            for c in 0..d {
                out[(new_h * dh + r) * d + c] = wo.data()[(old_h * dh + r) * d + c];
            }
        }
    }
    *w.get_mut(&name).unwrap() = Tensor::new(wo.shape().to_vec(), out).unwrap();
}

#[test]
fn head_reordering_leaves_logits_unchanged() {
    let cfg = TransformerConfig {
        n_heads: 4,
        ..tiny(12, 2)
    };
    let w = init_weights::<f64>(&cfg, 5).unwrap();
    let mut p = w.clone();
    let perm = [2, 0, 3, 1];
    for l in 0..2 {
        permute_heads(&mut p, &format!("enc.L{l}.self_attn"), &perm, 8);
        permute_heads(&mut p, &format!("dec.L{l}.self_attn"), &perm, 8);
        permute_heads(&mut p, &format!("dec.L{l}.cross_attn"), &perm, 8);
    }
    let src = vec![seq(&[5, 6, 7], 6), seq(&[8], 6)];
    let tgt = vec![seq(&[9, 10], 6), seq(&[11, 4, 5], 6)];
    let a = forward(&w, &cfg, &src, &tgt, false, 0).unwrap();
    let b = forward(&p, &cfg, &src, &tgt, false, 0).unwrap();
    assert!(!w.bit_eq(&p));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn greedy_decode_stops_on_rigged_end() {
    let cfg = tiny(12, 1);
    let mut w = init_weights::<f32>(&cfg, 6).unwrap();
    let mut bias = vec![0.0f64; 12];
    bias[END as usize] = 1e6;
    *w.get_mut("proj.out.b").unwrap() = Tensor::from_f64([12], &bias).unwrap();
    let out = greedy_decode(&w, &cfg, &seq(&[5, 6], 6)).unwrap();
    assert_eq!(out.ids, vec![START, END, PAD, PAD, PAD, PAD]);
    assert_eq!(out.true_length, 2);
}

#[test]
fn greedy_decode_never_exceeds_max_len() {
    let cfg = tiny(12, 1);
    let mut w = init_weights::<f32>(&cfg, 7).unwrap();
    let mut bias = vec![0.0f64; 12];
    bias[7] = 1e6; // never END
    *w.get_mut("proj.out.b").unwrap() = Tensor::from_f64([12], &bias).unwrap();
    let out = greedy_decode(&w, &cfg, &seq(&[5], 6)).unwrap();
    assert_eq!(out.ids, vec![START, 7, 7, 7, 7, 7]);
    assert_eq!(out.ids.len(), cfg.max_len);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_convex_combinations(
        n in 1usize..5, m in 1usize..6, dk in 1usize..5, dv in 1usize..4, seed in any::<u64>()
    ) {
        let mut rng = rng(seed);
        let q = random_tensor(&mut rng, &[n, dk], 3.0);
        let k = random_tensor(&mut rng, &[m, dk], 3.0);
        let v = random_tensor(&mut rng, &[m, dv], 3.0);
        let out = attention(&q, &k, &v, None).unwrap();
        for row in out.data().chunks(dv) {
            for (c, &x) in row.iter().enumerate() {
                let col: Vec<f64> = (0..m).map(|r| v.data()[r * dv + c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn whole_model_gradients_match_small_step_differences() {
    // A 1e-6 step keeps every ReLU input on one side of its kink.
    let cfg = tiny(20, 2);
    let src = [seq(&[5, 9, 4], 6), seq(&[7], 6)];
    let tgt = [seq(&[5, 9, 4], 6), seq(&[7], 6)];
    let (targets, keep): (Vec<usize>, Vec<bool>) = tgt
        .iter()
        .flat_map(|s| {
            (0..6).map(move |i| {
                (
                    s.ids.get(i + 1).copied().unwrap_or(PAD) as usize,
                    i + 1 < s.true_length,
                )
            })
        })
        .unzip();
    for seed in 1..4 {
        let w = init_weights::<f64>(&cfg, seed).unwrap();
        let loss_at = |w: &ModelWeights<f64>| {
            let g = fedbot_core::autograd::Graph::new();
            let bound = Bound::new(&g, w, &cfg, None).unwrap();
            let logits = bound
                .forward(
                    &IdBatch::from_sequences(&src),
                    &IdBatch::from_sequences(&tgt),
                )
                .unwrap();
            let ce = g.cross_entropy(logits, &targets, &keep).unwrap();
            let v = g.value(ce.loss).item();
            v
        };
        let g = fedbot_core::autograd::Graph::new();
        let bound = Bound::new(&g, &w, &cfg, None).unwrap();
        let logits = bound
            .forward(
                &IdBatch::from_sequences(&src),
                &IdBatch::from_sequences(&tgt),
            )
            .unwrap();
        let ce = g.cross_entropy(logits, &targets, &keep).unwrap();
        let grads = g.backward(ce.loss).unwrap();
        for (name, t) in w.iter() {
            let numeric = numeric_grad(
                |x| {
                    let mut moved = w.clone();
                    *moved.get_mut(name).unwrap() = x.clone();
                    loss_at(&moved)
                },
                t,
                1e-6,
            );
            let analytic: Vec<f64> = grads.get(name).unwrap().data().to_vec();
            let err = analytic
                .iter()
                .zip(&numeric)
                .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
                .fold(0.0, f64::max);
            assert!(err < 1e-4, "seed {seed}, {name}: {err:e}");
        }
    }
}
