//! `fedbot prepare`: CSV corpus to per-client directories.

use std::path::PathBuf;

use clap::Args;
use fedbot_core::client::{provision, MODEL_FILE, VOCAB_FILE};
use fedbot_core::data::{
    file_sha256, load_records, pair_conversations, partition, partition_by_brand, TRAIN_FILE,
    VAL_FILE,
};
use fedbot_core::kv::KvMap;
use fedbot_core::manifest::RunManifest;
use fedbot_core::tokenizer::{train_vocab, DEFAULT_VOCAB_SIZE};
use fedbot_core::transformer::TransformerConfig;

use crate::{create_dir, load_model_config, model_keys, CliError, Result, RUN_MANIFEST_FILE};

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Tweet CSV with the seven-column schema.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of clients for a random split.
    #[arg(long, required_unless_present = "by_brand")]
    pub clients: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// One client per answering brand instead of a random split.
    #[arg(long, conflicts_with = "clients")]
    pub by_brand: bool,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    pub min_freq: usize,
    /// Model architecture; `vocab_size` is replaced by the trained vocabulary's size.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: PrepareArgs) -> Result<()> {
    let loaded = load_records(&args.input)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.input.display())))?;
    let pairs = pair_conversations(&loaded.records);
    if pairs.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no query/response pairs found",
            args.input.display()
        )));
    }
    let datasets = match (args.by_brand, args.clients) {
        (true, _) => partition_by_brand(&pairs)?,
        (false, Some(k)) => partition(&pairs, k, args.seed)?,
        (false, None) => {
            return Err(CliError::Usage(
                "--clients is required without --by-brand".into(),
            ))
        }
    };

    // Training sides only, so validation text never shapes the vocabulary.
    let corpus: Vec<&str> = datasets
        .iter()
        .flat_map(|d| &d.train)
        .flat_map(|p| [p.query.as_str(), p.response.as_str()])
        .collect();
    let vocab = train_vocab(&corpus, args.vocab_size, args.min_freq)?;
    let base = match &args.config {
        Some(path) => load_model_config(path)?,
        None => TransformerConfig::default(),
    };
    let model = TransformerConfig {
        vocab_size: vocab.len(),
        ..base
    };
    model.validate()?;

    let out = create_dir(&args.out)?;
    vocab.save(out.join(VOCAB_FILE))?;
    model.to_kv().save(out.join(MODEL_FILE))?;

    let mut manifest = RunManifest::new("prepare");
    let mut config = KvMap::new();
    config.set("clients", datasets.len());
    config.set("by_brand", args.by_brand);
    config.set("vocab_size", args.vocab_size);
    config.set("min_freq", args.min_freq);
    model_keys(&model, &mut config);
    manifest.config = config;
    manifest.seeds.insert("split".into(), args.seed);
    manifest
        .datasets
        .insert(args.input.display().to_string(), file_sha256(&args.input)?);
    for ds in &datasets {
        let dir = provision(&out, ds, args.seed, &model, &vocab)?;
        for file in [TRAIN_FILE, VAL_FILE] {
            manifest.datasets.insert(
                format!("{}/{file}", ds.client_id),
                file_sha256(dir.join(file))?,
            );
        }
        log::info!(
            "{}: {} train, {} validation",
            ds.client_id,
            ds.train.len(),
            ds.validation.len()
        );
    }
    manifest.save(out.join(RUN_MANIFEST_FILE))?;
    println!(
        "{} records ({} skipped), {} pairs, {} clients, vocabulary of {} in {}",
        loaded.records.len(),
        loaded.skipped,
        pairs.len(),
        datasets.len(),
        vocab.len(),
        out.display()
    );
    Ok(())
}
