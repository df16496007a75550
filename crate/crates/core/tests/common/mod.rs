#![allow(dead_code)]

use fedbot_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus).unwrap());
        let fm = f(&Tensor::new(x.shape().to_vec(), minus).unwrap());
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Relative error with a small absolute floor so gradients that are
/// numerically zero compare as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

/// Small copy-task model over `words` plus the specials.
pub fn copy_model(
    vocab_size: usize,
    max_len: usize,
) -> fedbot_core::transformer::TransformerConfig {
    fedbot_core::transformer::TransformerConfig {
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        d_ff: 64,
        dropout: 0.0,
        attention_dropout: 0.0,
        activation_dropout: 0.0,
        max_len,
        vocab_size,
    }
}

pub fn adam(
    lr: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> fedbot_core::train::LocalTrainConfig {
    fedbot_core::train::LocalTrainConfig {
        epochs,
        lr,
        batch_size,
        optimizer: fedbot_core::train::OptimizerKind::Adam,
        seed,
        dropout: false,
        warmup: 0,
    }
}
