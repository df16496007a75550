//! Encoder-decoder transformer with post-norm residual blocks.
//!
//! Weights live in a [`ModelWeights`] with canonical names:
//!
//! | name | shape |
//! |------|-------|
//! | `embed.src`, `embed.tgt` | `[vocab, d_model]` |
//! | `enc.L{i}.self_attn.{wq,wk,wv,wo}` | `[d_model, d_model]` |
//! | `enc.L{i}.self_attn.{bq,bk,bv,bo}` | `[d_model]` |
//! | `enc.L{i}.ln{1,2}.{gain,bias}` | `[d_model]` |
//! | `enc.L{i}.ff.w1` / `ff.b1` | `[d_model, d_ff]` / `[d_ff]` |
//! | `enc.L{i}.ff.w2` / `ff.b2` | `[d_ff, d_model]` / `[d_model]` |
//! | `dec.L{i}.self_attn.*`, `dec.L{i}.cross_attn.*` | as above |
//! | `dec.L{i}.ln{1,2,3}.*`, `dec.L{i}.ff.*` | as above |
//! | `proj.out.w` / `proj.out.b` | `[d_model, vocab]` / `[vocab]` |

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::kv::{KvError, KvMap};
use crate::tensor::{Real, Tensor, TensorError};
use crate::tokenizer::{TokenSequence, END, PAD, START};
use crate::weights::ModelWeights;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Applied to embeddings and to every sub-layer output before the residual add.
    pub dropout: f64,
    pub attention_dropout: f64,
    pub activation_dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 256,
            n_heads: 8,
            n_layers: 4,
            d_ff: 512,
            dropout: 0.2,
            attention_dropout: 0.2,
            activation_dropout: 0.2,
            max_len: 30,
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return err("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len < 2 {
            return err("max_len must be at least 2".into());
        }
        if self.vocab_size < 5 {
            return err("vocab_size must cover the four specials plus content".into());
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("activation_dropout", self.activation_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return err(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Same architecture with every dropout rate set to zero.
    pub fn without_dropout(&self) -> Self {
        TransformerConfig {
            dropout: 0.0,
            attention_dropout: 0.0,
            activation_dropout: 0.0,
            ..self.clone()
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("d_model", self.d_model);
        kv.set("n_heads", self.n_heads);
        kv.set("n_layers", self.n_layers);
        kv.set("d_ff", self.d_ff);
        kv.set("dropout", self.dropout);
        kv.set("attention_dropout", self.attention_dropout);
        kv.set("activation_dropout", self.activation_dropout);
        kv.set("max_len", self.max_len);
        kv.set("vocab_size", self.vocab_size);
        kv
    }

    /// Reads a config; absent keys keep their defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = TransformerConfig::default();
        let cfg = TransformerConfig {
            d_model: kv.get_or("d_model", d.d_model)?,
            n_heads: kv.get_or("n_heads", d.n_heads)?,
            n_layers: kv.get_or("n_layers", d.n_layers)?,
            d_ff: kv.get_or("d_ff", d.d_ff)?,
            dropout: kv.get_or("dropout", d.dropout)?,
            attention_dropout: kv.get_or("attention_dropout", d.attention_dropout)?,
            activation_dropout: kv.get_or("activation_dropout", d.activation_dropout)?,
            max_len: kv.get_or("max_len", d.max_len)?,
            vocab_size: kv.get_or("vocab_size", d.vocab_size)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Embedding,
    Linear { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

fn attention_layout(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((
            format!("{prefix}.{w}"),
            vec![d, d],
            Init::Linear {
                fan_in: d,
                fan_out: d,
            },
        ));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        out.push((format!("{prefix}.{b}"), vec![d], Init::Zeros));
    }
}

fn norm_layout(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.gain"), vec![d], Init::Ones));
    out.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
}

fn ff_layout(prefix: &str, d: usize, f: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((
        format!("{prefix}.w1"),
        vec![d, f],
        Init::Linear {
            fan_in: d,
            fan_out: f,
        },
    ));
    out.push((format!("{prefix}.b1"), vec![f], Init::Zeros));
    out.push((
        format!("{prefix}.w2"),
        vec![f, d],
        Init::Linear {
            fan_in: f,
            fan_out: d,
        },
    ));
    out.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
}

fn layout(cfg: &TransformerConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = vec![
        ("embed.src".to_string(), vec![v, d], Init::Embedding),
        ("embed.tgt".to_string(), vec![v, d], Init::Embedding),
    ];
    for i in 0..cfg.n_layers {
        let p = format!("enc.L{i}");
        attention_layout(&format!("{p}.self_attn"), d, &mut out);
        norm_layout(&format!("{p}.ln1"), d, &mut out);
        ff_layout(&format!("{p}.ff"), d, f, &mut out);
        norm_layout(&format!("{p}.ln2"), d, &mut out);
    }
    for i in 0..cfg.n_layers {
        let p = format!("dec.L{i}");
        attention_layout(&format!("{p}.self_attn"), d, &mut out);
        norm_layout(&format!("{p}.ln1"), d, &mut out);
        attention_layout(&format!("{p}.cross_attn"), d, &mut out);
        norm_layout(&format!("{p}.ln2"), d, &mut out);
        ff_layout(&format!("{p}.ff"), d, f, &mut out);
        norm_layout(&format!("{p}.ln3"), d, &mut out);
    }
    out.push((
        "proj.out.w".to_string(),
        vec![d, v],
        Init::Linear {
            fan_in: d,
            fan_out: v,
        },
    ));
    out.push(("proj.out.b".to_string(), vec![v], Init::Zeros));
    out
}

/// Canonical `(name, shape)` list in wire order.
pub fn parameter_shapes(cfg: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

pub fn count_parameters(cfg: &TransformerConfig) -> usize {
    layout(cfg)
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum()
}

/// Xavier-uniform linear layers, `N(0, 1/d_model)` embeddings, zero biases
/// and unit norm gains. Deterministic in `seed`.
///
/// After the `sqrt(d_model)` input scaling each embedding row has roughly
/// unit norm, well below the positional encoding's `sqrt(d_model / 2)`, so
/// position dominates early attention. Larger embeddings made small models
/// memorize token sequences instead of learning to align.
pub fn init_weights<T: Real>(cfg: &TransformerConfig, seed: u64) -> Result<ModelWeights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = Normal::new(0.0, 1.0 / cfg.d_model as f64).expect("positive std");
    let mut w = ModelWeights::new();
    for (name, shape, init) in layout(cfg) {
        let len: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Embedding => (0..len).map(|_| T::of(embed.sample(&mut rng))).collect(),
            Init::Linear { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                (0..len).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
            Init::Zeros => vec![T::zero(); len],
            Init::Ones => vec![T::one(); len],
        };
        w.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(w)
}

/// Checks names and shapes against the canonical layout.
pub fn check_weights<T: Real>(weights: &ModelWeights<T>, cfg: &TransformerConfig) -> Result<()> {
    let expected = parameter_shapes(cfg);
    if expected.len() != weights.len() {
        return Err(ModelError::Config(format!(
            "expected {} tensors, weights hold {}",
            expected.len(),
            weights.len()
        )));
    }
    for ((name, shape), (wn, wt)) in expected.iter().zip(weights.iter()) {
        if name != wn || shape.as_slice() != wt.shape() {
            return Err(ModelError::Config(format!(
                "tensor {wn:?} {:?} does not match expected {name:?} {shape:?}",
                wt.shape()
            )));
        }
    }
    Ok(())
}

/// Sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`.
pub fn positional_encoding<T: Real>(max_len: usize, d_model: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(max_len * d_model);
    for p in 0..max_len {
        for j in 0..d_model {
            let i2 = (j - j % 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d_model as f64);
            data.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![max_len, d_model], data).expect("positive dims")
}

/// Scaled dot-product attention on a graph. `q`: `[.., n, dk]`,
/// `k`: `[.., m, dk]`, `v`: `[.., m, dv]`; `mask` marks blocked
/// `(query, key)` scores over the full `[.., n, m]` score shape.
pub fn attention_on<T: Real>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<Var> {
    let dk = *g.shape(q).last().expect("non-empty");
    let scores = g.matmul_nt(q, k)?;
    let mut scores = g.scale(scores, T::of(1.0 / (dk as f64).sqrt()));
    if let Some(mask) = mask {
        scores = g.mask_fill(scores, mask)?;
    }
    let weights = g.softmax(scores);
    Ok(g.matmul(weights, v)?)
}

/// Tensor-level attention: `softmax(QKᵀ/√dk + mask) V`.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let out = attention_on(&g, qv, kv, vv, mask.map(|m| Arc::new(m.to_vec())))?;
    let t = g.value(out).clone();
    Ok(t)
}

/// Projection weights of one attention block.
#[derive(Debug, Clone)]
pub struct AttentionWeights<T: Real> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn from_weights(weights: &ModelWeights<T>, prefix: &str) -> Option<Self> {
        let get = |n: &str| weights.get(&format!("{prefix}.{n}")).cloned();
        Some(AttentionWeights {
            wq: get("wq")?,
            bq: get("bq")?,
            wk: get("wk")?,
            bk: get("bk")?,
            wv: get("wv")?,
            bv: get("bv")?,
            wo: get("wo")?,
            bo: get("bo")?,
        })
    }
}

/// Tensor-level multi-head attention. `x_q`: `[b, n, d]`, `x_kv`: `[b, m, d]`;
/// `mask` covers `[b, h, n, m]`.
pub fn multi_head_attention<T: Real>(
    x_q: &Tensor<T>,
    x_kv: &Tensor<T>,
    w: &AttentionWeights<T>,
    n_heads: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let d = x_q.last_dim();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(ModelError::Config(format!(
            "d_model {d} not divisible by {n_heads} heads"
        )));
    }
    let g = Graph::new();
    let mut params = HashMap::new();
    for (n, t) in [
        ("wq", &w.wq),
        ("bq", &w.bq),
        ("wk", &w.wk),
        ("bk", &w.bk),
        ("wv", &w.wv),
        ("bv", &w.bv),
        ("wo", &w.wo),
        ("bo", &w.bo),
    ] {
        params.insert(format!("a.{n}"), g.constant(t.clone()));
    }
    let ctx = Ctx {
        g: &g,
        params: &params,
        n_heads,
        dropout: None,
    };
    let xq = g.constant(x_q.clone());
    let xkv = g.constant(x_kv.clone());
    let out = ctx.mha("a", xq, xkv, mask.map(|m| Arc::new(m.to_vec())))?;
    let t = g.value(out).clone();
    Ok(t)
}

/// Seeded inverted dropout.
pub struct Dropout {
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(seed: u64) -> Self {
        Dropout {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn mask<T: Real>(&mut self, len: usize, rate: f64) -> Vec<T> {
        let scale = T::of(1.0 / (1.0 - rate));
        (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect()
    }

    fn apply_rate<T: Real>(&mut self, g: &Graph<T>, x: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let len = g.value(x).len();
        Ok(g.mul_const(x, self.mask(len, rate))?)
    }
}

struct Ctx<'a, T: Real> {
    g: &'a Graph<T>,
    params: &'a HashMap<String, Var>,
    n_heads: usize,
    dropout: Option<(&'a std::cell::RefCell<Dropout>, &'a TransformerConfig)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    fn p(&self, name: &str) -> Var {
        *self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    fn linear(&self, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = self.g.matmul(x, self.p(w))?;
        Ok(self.g.add(y, self.p(b))?)
    }

    fn drop(&self, x: Var, pick: impl Fn(&TransformerConfig) -> f64) -> Result<Var> {
        match &self.dropout {
            Some((d, cfg)) => d.borrow_mut().apply_rate(self.g, x, pick(cfg)),
            None => Ok(x),
        }
    }

    /// `[b, n, d] -> [b, h, n, d/h]`
    fn split_heads(&self, x: Var) -> Result<Var> {
        let s = self.g.shape(x);
        let (b, n, d) = (s[0], s[1], s[2]);
        let r = self.g.reshape(x, [b, n, self.n_heads, d / self.n_heads])?;
        Ok(self.g.swap_axes12(r)?)
    }

    fn merge_heads(&self, x: Var) -> Result<Var> {
        let s = self.g.shape(x);
        let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
        let r = self.g.swap_axes12(x)?;
        Ok(self.g.reshape(r, [b, n, h * dh])?)
    }

    fn mha(&self, prefix: &str, xq: Var, xkv: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let q =
            self.split_heads(self.linear(xq, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?)?;
        let k = self.split_heads(self.linear(
            xkv,
            &format!("{prefix}.wk"),
            &format!("{prefix}.bk"),
        )?)?;
        let v = self.split_heads(self.linear(
            xkv,
            &format!("{prefix}.wv"),
            &format!("{prefix}.bv"),
        )?)?;
        let dk = self.g.shape(q)[3];
        let scores = self.g.matmul_nt(q, k)?;
        let mut scores = self.g.scale(scores, T::of(1.0 / (dk as f64).sqrt()));
        if let Some(mask) = mask {
            scores = self.g.mask_fill(scores, mask)?;
        }
        let attn = self.g.softmax(scores);
        let attn = self.drop(attn, |c| c.attention_dropout)?;
        let ctx = self.merge_heads(self.g.matmul(attn, v)?)?;
        self.linear(ctx, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn add_norm(&self, x: Var, sub: Var, ln: &str) -> Result<Var> {
        let sub = self.drop(sub, |c| c.dropout)?;
        let s = self.g.add(x, sub)?;
        Ok(self.g.layer_norm(
            s,
            self.p(&format!("{ln}.gain")),
            self.p(&format!("{ln}.bias")),
            LAYER_NORM_EPS,
        )?)
    }

    fn feed_forward(&self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.g.relu(h);
        let h = self.drop(h, |c| c.activation_dropout)?;
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }
}

/// A padded batch of equal-length id rows plus per-row true lengths.
#[derive(Debug, Clone)]
pub struct IdBatch {
    pub ids: Vec<usize>,
    pub rows: usize,
    pub len: usize,
    pub true_lengths: Vec<usize>,
}

impl IdBatch {
    pub fn from_sequences(seqs: &[TokenSequence]) -> Self {
        let len = seqs.first().map_or(0, |s| s.ids.len());
        assert!(
            seqs.iter().all(|s| s.ids.len() == len),
            "sequences must share a length"
        );
        IdBatch {
            ids: seqs
                .iter()
                .flat_map(|s| s.ids.iter().map(|&i| i as usize))
                .collect(),
            rows: seqs.len(),
            len,
            true_lengths: seqs.iter().map(|s| s.true_length).collect(),
        }
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let len = rows.first().map_or(0, Vec::len);
        assert!(
            rows.iter().all(|r| r.len() == len),
            "rows must share a length"
        );
        IdBatch {
            ids: rows
                .iter()
                .flat_map(|r| r.iter().map(|&i| i as usize))
                .collect(),
            rows: rows.len(),
            len,
            true_lengths: vec![len; rows.len()],
        }
    }

    fn key_blocked(&self, row: usize, pos: usize) -> bool {
        pos >= self.true_lengths[row]
    }
}

/// Transformer bound to a graph: every weight registered as a parameter.
pub struct Bound<'a, T: Real> {
    cfg: &'a TransformerConfig,
    g: &'a Graph<T>,
    params: HashMap<String, Var>,
    dropout: Option<std::cell::RefCell<Dropout>>,
}

impl<'a, T: Real> Bound<'a, T> {
    /// Registers weights as trainable parameters. When `train_seed` is set
    /// and the config has non-zero rates, dropout is active.
    pub fn new(
        g: &'a Graph<T>,
        weights: &ModelWeights<T>,
        cfg: &'a TransformerConfig,
        train_seed: Option<u64>,
    ) -> Result<Self> {
        check_weights(weights, cfg)?;
        let params = weights
            .iter()
            .map(|(n, t)| (n.to_string(), g.param(n, t.clone())))
            .collect();
        Ok(Bound {
            cfg,
            g,
            params,
            dropout: train_seed.map(|s| std::cell::RefCell::new(Dropout::new(s))),
        })
    }

    fn ctx(&self) -> Ctx<'_, T> {
        Ctx {
            g: self.g,
            params: &self.params,
            n_heads: self.cfg.n_heads,
            dropout: self.dropout.as_ref().map(|d| (d, self.cfg)),
        }
    }

    fn embed(&self, table: &str, batch: &IdBatch) -> Result<Var> {
        let d = self.cfg.d_model;
        if batch.len > self.cfg.max_len {
            return Err(ModelError::Config(format!(
                "sequence length {} exceeds max_len {}",
                batch.len, self.cfg.max_len
            )));
        }
        let ctx = self.ctx();
        let e = self.g.embedding(ctx.p(table), &batch.ids)?;
        let e = self.g.reshape(e, [batch.rows, batch.len, d])?;
        let e = self.g.scale(e, T::of((d as f64).sqrt()));
        let pe = self.g.constant(positional_encoding(batch.len, d));
        let x = self.g.add(e, pe)?;
        ctx.drop(x, |c| c.dropout)
    }

    fn padding_mask(&self, src: &IdBatch, queries: usize) -> Arc<Vec<bool>> {
        let h = self.cfg.n_heads;
        let mut m = Vec::with_capacity(src.rows * h * queries * src.len);
        for b in 0..src.rows {
            for _ in 0..h * queries {
                m.extend((0..src.len).map(|j| src.key_blocked(b, j)));
            }
        }
        Arc::new(m)
    }

    fn causal_mask(&self, rows: usize, n: usize) -> Arc<Vec<bool>> {
        let h = self.cfg.n_heads;
        let mut m = Vec::with_capacity(rows * h * n * n);
        for _ in 0..rows * h {
            for i in 0..n {
                m.extend((0..n).map(|j| j > i));
            }
        }
        Arc::new(m)
    }

    /// Encoder stack over `src`; returns `[rows, len, d_model]`.
    pub fn encode(&self, src: &IdBatch) -> Result<Var> {
        let ctx = self.ctx();
        let mask = self.padding_mask(src, src.len);
        let mut x = self.embed("embed.src", src)?;
        for i in 0..self.cfg.n_layers {
            let p = format!("enc.L{i}");
            let a = ctx.mha(&format!("{p}.self_attn"), x, x, Some(mask.clone()))?;
            x = ctx.add_norm(x, a, &format!("{p}.ln1"))?;
            let f = ctx.feed_forward(x, &format!("{p}.ff"))?;
            x = ctx.add_norm(x, f, &format!("{p}.ln2"))?;
        }
        Ok(x)
    }

    /// Decoder stack over `tgt` attending to `memory`; returns hidden states.
    pub fn decode(&self, memory: Var, src: &IdBatch, tgt: &IdBatch) -> Result<Var> {
        let ctx = self.ctx();
        let self_mask = self.causal_mask(tgt.rows, tgt.len);
        let cross_mask = self.padding_mask(src, tgt.len);
        let mut x = self.embed("embed.tgt", tgt)?;
        for i in 0..self.cfg.n_layers {
            let p = format!("dec.L{i}");
            let a = ctx.mha(&format!("{p}.self_attn"), x, x, Some(self_mask.clone()))?;
            x = ctx.add_norm(x, a, &format!("{p}.ln1"))?;
            let c = ctx.mha(
                &format!("{p}.cross_attn"),
                x,
                memory,
                Some(cross_mask.clone()),
            )?;
            x = ctx.add_norm(x, c, &format!("{p}.ln2"))?;
            let f = ctx.feed_forward(x, &format!("{p}.ff"))?;
            x = ctx.add_norm(x, f, &format!("{p}.ln3"))?;
        }
        Ok(x)
    }

    pub fn project(&self, hidden: Var) -> Result<Var> {
        self.ctx().linear(hidden, "proj.out.w", "proj.out.b")
    }

    /// Full teacher-forced pass; logits `[rows, tgt.len, vocab]`.
    pub fn forward(&self, src: &IdBatch, tgt_in: &IdBatch) -> Result<Var> {
        self.check_ids(src)?;
        self.check_ids(tgt_in)?;
        let memory = self.encode(src)?;
        let hidden = self.decode(memory, src, tgt_in)?;
        self.project(hidden)
    }

    fn check_ids(&self, batch: &IdBatch) -> Result<()> {
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(TensorError::Index {
                index: bad,
                size: self.cfg.vocab_size,
            }
            .into());
        }
        Ok(())
    }
}

/// Teacher-forced logits `[batch, max_len, vocab]`. Dropout runs only when
/// `train_mode` is set, seeded by `seed`.
pub fn forward<T: Real>(
    weights: &ModelWeights<T>,
    cfg: &TransformerConfig,
    src: &[TokenSequence],
    tgt_in: &[TokenSequence],
    train_mode: bool,
    seed: u64,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let model = Bound::new(&g, weights, cfg, train_mode.then_some(seed))?;
    let logits = model.forward(
        &IdBatch::from_sequences(src),
        &IdBatch::from_sequences(tgt_in),
    )?;
    let t = g.value(logits).clone();
    Ok(t)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy generation from `START` until `END` or `max_len` ids.
pub fn greedy_decode<T: Real>(
    weights: &ModelWeights<T>,
    cfg: &TransformerConfig,
    src: &TokenSequence,
) -> Result<TokenSequence> {
    let g = Graph::new();
    let model = Bound::new(&g, weights, cfg, None)?;
    let src_batch = IdBatch::from_sequences(std::slice::from_ref(src));
    model.check_ids(&src_batch)?;
    let memory = model.encode(&src_batch)?;
    let mut out = vec![START];
    while out.len() < cfg.max_len {
        let tgt = IdBatch::from_rows(&[out.clone()]);
        let hidden = model.decode(memory, &src_batch, &tgt)?;
        let last = g.take_last(hidden)?;
        let logits = model.project(last)?;
        let next = argmax(g.value(logits).data()) as u32;
        out.push(next);
        if next == END {
            break;
        }
    }
    let true_length = out.len();
    out.resize(cfg.max_len, PAD);
    Ok(TokenSequence {
        ids: out,
        true_length,
    })
}
