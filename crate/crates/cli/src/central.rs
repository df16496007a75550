//! `fedbot train-central` and `fedbot evaluate`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use fedbot_core::chat::ModelBundle;
use fedbot_core::client::{MODEL_FILE, VOCAB_FILE};
use fedbot_core::data::{file_sha256, read_pairs, ConversationPair, TRAIN_FILE, VAL_FILE};
use fedbot_core::kv::KvMap;
use fedbot_core::manifest::RunManifest;
use fedbot_core::metrics::{append_log, RoundMetrics};
use fedbot_core::tokenizer::Vocabulary;
use fedbot_core::train::{encode_pairs, local_evaluate, LocalTrainConfig, OptimizerKind, Trainer};
use fedbot_core::transformer::init_weights;

use crate::{
    create_dir, load_bundle, load_model_config, model_keys, truncate_log, CliError, Result,
    METRICS_FILE, RUN_MANIFEST_FILE,
};

pub const CENTRAL_WEIGHTS: &str = "central.fbw";

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value = "sgd")]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Warm-up steps for the inverse-square-root schedule; 0 keeps the rate constant.
    #[arg(long, default_value_t = 0)]
    pub warmup: u64,
    /// Train with the model's dropout rates instead of none.
    #[arg(long)]
    pub dropout: bool,
}

impl TrainArgs {
    pub fn config(&self) -> Result<LocalTrainConfig> {
        let cfg = LocalTrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch,
            optimizer: self.optimizer,
            seed: self.seed,
            dropout: self.dropout,
            warmup: self.warmup,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn record(&self, kv: &mut KvMap) {
        kv.set("epochs", self.epochs);
        kv.set("lr", self.lr);
        kv.set("batch", self.batch);
        kv.set("optimizer", self.optimizer);
        kv.set("warmup", self.warmup);
        kv.set("dropout", self.dropout);
    }
}

#[derive(Debug, Args)]
pub struct CentralArgs {
    /// A prepared directory: either one holding train.tsv itself, or one
    /// whose client subdirectories are merged.
    #[arg(long)]
    pub data: PathBuf,
    /// Model config; defaults to model.cfg in the data directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to vocab.txt in the data directory.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Output directory; defaults to `<data>/central`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

/// Directories under `data` that hold training pairs, sorted by name.
fn dataset_dirs(data: &Path) -> Result<Vec<PathBuf>> {
    if data.join(TRAIN_FILE).exists() {
        return Ok(vec![data.to_path_buf()]);
    }
    let entries = std::fs::read_dir(data).map_err(|e| CliError::io(data, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(TRAIN_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no {TRAIN_FILE} found",
            data.display()
        )));
    }
    Ok(dirs)
}

pub fn run_central(args: CentralArgs) -> Result<()> {
    let cfg = args.train.config()?;
    let model = load_model_config(
        &args
            .config
            .clone()
            .unwrap_or_else(|| args.data.join(MODEL_FILE)),
    )?;
    let vocab_path = args
        .vocab
        .clone()
        .unwrap_or_else(|| args.data.join(VOCAB_FILE));
    let vocab = Vocabulary::load(&vocab_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", vocab_path.display())))?;
    if vocab.len() != model.vocab_size {
        return Err(CliError::Data(format!(
            "vocabulary has {} entries but the model config expects {}",
            vocab.len(),
            model.vocab_size
        )));
    }

    let mut manifest = RunManifest::new("train-central");
    let (mut train_pairs, mut val_pairs) = (Vec::new(), Vec::new());
    for dir in dataset_dirs(&args.data)? {
        let mut read = |file: &str, into: &mut Vec<ConversationPair>| -> Result<()> {
            let path = dir.join(file);
            if path.exists() {
                into.extend(read_pairs(&path)?);
                manifest
                    .datasets
                    .insert(path.display().to_string(), file_sha256(&path)?);
            }
            Ok(())
        };
        read(TRAIN_FILE, &mut train_pairs)?;
        read(VAL_FILE, &mut val_pairs)?;
    }
    if train_pairs.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no training pairs",
            args.data.display()
        )));
    }
    let train = encode_pairs(&vocab, &train_pairs, model.max_len);
    let val = encode_pairs(&vocab, &val_pairs, model.max_len);
    if val.is_empty() {
        log::warn!("no validation pairs, reporting training-set metrics in the validation columns");
    }

    let out = create_dir(
        &args
            .out
            .clone()
            .unwrap_or_else(|| args.data.join("central")),
    )?;
    let metrics_path = out.join(METRICS_FILE);
    truncate_log(&metrics_path)?;
    let mut trainer = Trainer::new(init_weights(&model, cfg.seed)?, &model, &cfg)?;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (train_loss, train_acc) = trainer.epoch(&train, epoch)?;
        let (val_acc, val_loss) = if val.is_empty() {
            (train_acc, train_loss)
        } else {
            local_evaluate(trainer.weights(), &model, &val)?
        };
        let row = RoundMetrics {
            t: epoch as u32 + 1,
            n_received: 1,
            mean_train_acc: train_acc,
            mean_val_acc: val_acc,
            mean_train_loss: train_loss,
            mean_val_loss: val_loss,
            global_val_acc: None,
            global_val_loss: None,
        };
        append_log(&metrics_path, &row)?;
        manifest.round_seconds.push(start.elapsed().as_secs_f64());
        log::info!("epoch {}: {}", epoch + 1, row.to_log_line());
    }

    let bundle = ModelBundle {
        weights: trainer.into_weights(),
        model,
        vocab,
    };
    let weights_path = bundle.save(&out, CENTRAL_WEIGHTS)?;
    let mut config = KvMap::new();
    model_keys(&bundle.model, &mut config);
    args.train.record(&mut config);
    manifest.config = config;
    manifest.seeds.insert("init".into(), cfg.seed);
    manifest.seeds.insert("shuffle".into(), cfg.seed);
    manifest.metrics.push(metrics_path);
    manifest.save(out.join(RUN_MANIFEST_FILE))?;
    println!("{}", weights_path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// `query<TAB>response` pairs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also append the row to this metrics log.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

/// Prints one metrics-log row: round 0, one model, validation columns
/// filled and training columns `NaN` since no training took place.
pub fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let bundle = load_bundle(&args.weights, args.vocab.as_deref(), args.config.as_deref())?;
    let pairs = read_pairs(&args.data)?;
    if pairs.is_empty() {
        return Err(CliError::Data(format!("{}: no pairs", args.data.display())));
    }
    let data = encode_pairs(&bundle.vocab, &pairs, bundle.model.max_len);
    let (acc, loss) = local_evaluate(&bundle.weights, &bundle.model, &data)?;
    let row = RoundMetrics {
        t: 0,
        n_received: 1,
        mean_train_acc: f64::NAN,
        mean_val_acc: acc,
        mean_train_loss: f64::NAN,
        mean_val_loss: loss,
        global_val_acc: None,
        global_val_loss: None,
    };
    if let Some(path) = &args.metrics_out {
        append_log(path, &row)?;
    }
    println!("{}", row.to_log_line());
    eprintln!(
        "accuracy {acc:.2}%  loss {loss:.4}  ({} pairs)",
        pairs.len()
    );
    Ok(())
}
