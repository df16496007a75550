//! Inference on a trained model, and the on-disk model bundle.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::client::{MODEL_FILE, VOCAB_FILE};
use crate::kv::KvMap;
use crate::protocol::{deserialize_weights, serialize_weights, ProtocolError};
use crate::tokenizer::{self, normalize, TokenizerError, Vocabulary};
use crate::transformer::{check_weights, greedy_decode, ModelError, TransformerConfig};
use crate::weights::ModelWeights;

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("message is empty after normalization")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Format(#[from] ProtocolError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Greedy response to `message`.
pub fn reply(
    weights: &ModelWeights,
    model: &TransformerConfig,
    vocab: &Vocabulary,
    message: &str,
) -> Result<String, ChatError> {
    if normalize(message).is_empty() {
        return Err(ChatError::Empty);
    }
    let src = tokenizer::encode(vocab, message, model.max_len);
    let out = greedy_decode(weights, &model.without_dropout(), &src)?;
    Ok(tokenizer::decode(vocab, &out.ids[..out.true_length])?)
}

/// Weights plus the vocabulary and configuration they were trained with.
/// On disk: a weights file with `vocab.txt` and `model.cfg` beside it.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub weights: ModelWeights,
    pub model: TransformerConfig,
    pub vocab: Vocabulary,
}

impl ModelBundle {
    /// Loads `weights`; `vocab` and `config` default to the files next to it.
    pub fn load(
        weights: &Path,
        vocab: Option<&Path>,
        config: Option<&Path>,
    ) -> Result<Self, ChatError> {
        let dir = weights.parent().unwrap_or(Path::new("."));
        let vocab_path = vocab.map_or_else(|| dir.join(VOCAB_FILE), Path::to_path_buf);
        let config_path = config.map_or_else(|| dir.join(MODEL_FILE), Path::to_path_buf);
        let bytes = fs::read(weights).map_err(|source| ChatError::Io {
            path: weights.to_path_buf(),
            source,
        })?;
        let weights = deserialize_weights(&bytes)?;
        let vocab = Vocabulary::load(&vocab_path)?;
        let model =
            TransformerConfig::from_kv(&KvMap::load(&config_path).map_err(ModelError::from)?)?;
        check_weights(&weights, &model)?;
        if vocab.len() != model.vocab_size {
            return Err(ModelError::Config(format!(
                "{} has {} entries, model expects {}",
                vocab_path.display(),
                vocab.len(),
                model.vocab_size
            ))
            .into());
        }
        Ok(ModelBundle {
            weights,
            model,
            vocab,
        })
    }

    /// Writes `dir/<name>`, `dir/vocab.txt` and `dir/model.cfg`; the weights
    /// go through a temporary file so readers never see a partial blob.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf, ChatError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ChatError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(name);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serialize_weights(&self.weights)).map_err(io(&tmp))?;
        fs::rename(&tmp, &path).map_err(io(&path))?;
        self.vocab.save(dir.join(VOCAB_FILE))?;
        self.model
            .to_kv()
            .save(dir.join(MODEL_FILE))
            .map_err(ModelError::from)?;
        Ok(path)
    }
}
