//! Local mini-batch training and teacher-forced evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::Graph;
use crate::data::ConversationPair;
use crate::optim::{adam_step, sgd_step, transformer_lr, AdamParams, AdamState};
use crate::tensor::TensorError;
use crate::tokenizer::{encode, TokenSequence, Vocabulary, PAD};
use crate::transformer::{argmax, Bound, IdBatch, ModelError, TransformerConfig};
use crate::weights::ModelWeights;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Contract(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!(
                "unknown optimizer {other:?} (expected sgd or adam)"
            )),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub dropout: bool,
    /// Zero keeps `lr` constant. Otherwise the step size is `lr` times the
    /// warm-up/inverse-square-root schedule with this many warm-up steps.
    pub warmup: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        LocalTrainConfig {
            epochs: 1,
            lr: 0.1,
            batch_size: 32,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            dropout: false,
            warmup: 0,
        }
    }
}

impl LocalTrainConfig {
    /// A zero learning rate is accepted so that "no-op" rounds can be run.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !self.lr.is_finite() || self.lr < 0.0 {
            return Err(TrainError::Contract(format!(
                "invalid local training config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-round seed so successive rounds see different shuffles.
pub fn round_seed(base: u64, t: u32) -> u64 {
    base.wrapping_add(u64::from(t).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub src: TokenSequence,
    pub tgt: TokenSequence,
}

pub fn encode_pairs(
    vocab: &Vocabulary,
    pairs: &[ConversationPair],
    max_len: usize,
) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| EncodedPair {
            src: encode(vocab, &p.query, max_len),
            tgt: encode(vocab, &p.response, max_len),
        })
        .collect()
}

/// Next-token targets for teacher forcing: position `i` predicts `ids[i+1]`
/// and is scored only while `i + 1` is inside the unpadded sequence.
pub fn shifted_targets(batch: &[&EncodedPair]) -> (Vec<usize>, Vec<bool>) {
    let mut targets = Vec::new();
    let mut keep = Vec::new();
    for p in batch {
        let ids = &p.tgt.ids;
        for i in 0..ids.len() {
            let next = i + 1;
            let scored = next < p.tgt.true_length;
            targets.push(if scored {
                ids[next] as usize
            } else {
                PAD as usize
            });
            keep.push(scored);
        }
    }
    (targets, keep)
}

struct BatchStats {
    loss_sum: f64,
    correct: usize,
    counted: usize,
}

fn count_correct(logits: &[f32], vocab: usize, targets: &[usize], keep: &[bool]) -> usize {
    logits
        .chunks(vocab)
        .zip(targets.iter().zip(keep))
        .filter(|(row, (&t, &k))| k && argmax(row) == t)
        .count()
}

pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Token-weighted mean loss over the final epoch.
    pub train_loss: f64,
    /// Teacher-forced token accuracy over the final epoch, in percent.
    pub train_acc: f64,
}

/// Stateful mini-batch trainer; optimizer moments persist across epochs.
pub struct Trainer<'a> {
    model: TransformerConfig,
    cfg: &'a LocalTrainConfig,
    weights: ModelWeights,
    adam: AdamState,
    steps: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        weights: ModelWeights,
        model: &TransformerConfig,
        cfg: &'a LocalTrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = if cfg.dropout {
            model.clone()
        } else {
            model.without_dropout()
        };
        Ok(Trainer {
            model,
            cfg,
            weights,
            adam: AdamState::new(),
            steps: 0,
        })
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    /// Step size for the most recent optimizer step.
    fn lr(&self) -> f64 {
        match self.cfg.warmup {
            0 => self.cfg.lr,
            w => self.cfg.lr * transformer_lr(self.model.d_model, self.steps, w),
        }
    }

    /// One shuffled pass over `data`, seeded from `(cfg.seed, epoch)`; the
    /// last batch may be short. Returns token-weighted (loss, accuracy %).
    pub fn epoch(&mut self, data: &[EncodedPair], epoch: usize) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(TrainError::Contract("empty training set".into()));
        }
        let cfg = self.cfg;
        let epoch_seed = round_seed(cfg.seed, epoch as u32);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut stats = BatchStats {
            loss_sum: 0.0,
            correct: 0,
            counted: 0,
        };
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &data[i]).collect();
            let dropout_seed = cfg.dropout.then(|| round_seed(epoch_seed, b as u32 + 1));
            let g = Graph::new();
            let bound = Bound::new(&g, &self.weights, &self.model, dropout_seed)?;
            let src: Vec<TokenSequence> = batch.iter().map(|p| p.src.clone()).collect();
            let tgt: Vec<TokenSequence> = batch.iter().map(|p| p.tgt.clone()).collect();
            let logits = bound.forward(
                &IdBatch::from_sequences(&src),
                &IdBatch::from_sequences(&tgt),
            )?;
            let (targets, keep) = shifted_targets(&batch);
            let ce = g.cross_entropy(logits, &targets, &keep)?;
            let loss = f64::from(g.value(ce.loss).item());
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            stats.loss_sum += loss * ce.counted as f64;
            stats.counted += ce.counted;
            stats.correct += count_correct(
                g.value(logits).data(),
                self.model.vocab_size,
                &targets,
                &keep,
            );
            if ce.all_masked() {
                continue;
            }
            let grads = g.backward(ce.loss)?;
            self.steps += 1;
            let lr = self.lr() as f32;
            self.weights = match cfg.optimizer {
                OptimizerKind::Sgd => sgd_step(&self.weights, &grads, lr)?,
                OptimizerKind::Adam => {
                    let state = std::mem::take(&mut self.adam);
                    let (state, next) =
                        adam_step(state, &self.weights, &grads, lr, AdamParams::default())?;
                    self.adam = state;
                    next
                }
            };
        }
        Ok(ratio(&stats))
    }
}

/// Runs `cfg.epochs` passes of shuffled mini-batch training from `weights`.
/// Adam moments start from zero on every call.
pub fn client_update(
    weights: &ModelWeights,
    model: &TransformerConfig,
    data: &[EncodedPair],
    cfg: &LocalTrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(weights.clone(), model, cfg)?;
    let mut last = (0.0, 0.0);
    for epoch in 0..cfg.epochs {
        last = trainer.epoch(data, epoch)?;
    }
    Ok(TrainOutcome {
        weights: trainer.into_weights(),
        train_loss: last.0,
        train_acc: last.1,
    })
}

fn ratio(s: &BatchStats) -> (f64, f64) {
    if s.counted == 0 {
        return (0.0, 0.0);
    }
    (
        s.loss_sum / s.counted as f64,
        100.0 * s.correct as f64 / s.counted as f64,
    )
}

/// Teacher-forced token accuracy (percent) and mean cross-entropy, with
/// dropout off. Both are token-weighted over every scored position.
pub fn local_evaluate(
    weights: &ModelWeights,
    model: &TransformerConfig,
    data: &[EncodedPair],
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(TrainError::Contract("empty validation set".into()));
    }
    let model = model.without_dropout();
    let mut stats = BatchStats {
        loss_sum: 0.0,
        correct: 0,
        counted: 0,
    };
    for chunk in data.chunks(EVAL_BATCH) {
        let batch: Vec<&EncodedPair> = chunk.iter().collect();
        let g = Graph::new();
        let bound = Bound::new(&g, weights, &model, None)?;
        let src: Vec<TokenSequence> = chunk.iter().map(|p| p.src.clone()).collect();
        let tgt: Vec<TokenSequence> = chunk.iter().map(|p| p.tgt.clone()).collect();
        let logits = bound.forward(
            &IdBatch::from_sequences(&src),
            &IdBatch::from_sequences(&tgt),
        )?;
        let (targets, keep) = shifted_targets(&batch);
        let logits = g.value(logits);
        let (loss, counted) = crate::autograd::cross_entropy(&logits, &targets, &keep)?;
        stats.loss_sum += f64::from(loss) * counted as f64;
        stats.counted += counted;
        stats.correct += count_correct(logits.data(), model.vocab_size, &targets, &keep);
    }
    let (loss, acc) = ratio(&stats);
    Ok((acc, loss))
}
