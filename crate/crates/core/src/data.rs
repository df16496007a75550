//! Corpus ingestion, query/response pairing and per-client partitioning.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kv::{KvError, KvMap};
use crate::tokenizer::normalize;

pub const VALIDATION_FRACTION: f64 = 0.2;

pub const TRAIN_FILE: &str = "train.tsv";
pub const VAL_FILE: &str = "val.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";

const COLUMNS: [&str; 7] = [
    "tweet_id",
    "author_id",
    "inbound",
    "created_at",
    "text",
    "response_tweet_id",
    "in_response_to_tweet_id",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing required column {0:?}")]
    Schema(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}:{line}: expected `query<TAB>response`")]
    Tsv { path: PathBuf, line: usize },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Kv(#[from] KvError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTweetRecord {
    pub tweet_id: String,
    pub author_id: String,
    pub inbound: bool,
    pub created_at: String,
    pub text: String,
    pub response_tweet_id: Option<String>,
    pub in_response_to_tweet_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConversationPair {
    pub query: String,
    pub response: String,
    pub brand: String,
}

impl ConversationPair {
    /// Normalizes both sides; `None` when either ends up empty.
    pub fn normalized(query: &str, response: &str, brand: &str) -> Option<Self> {
        let query = normalize(query);
        let response = normalize(response);
        if query.is_empty() || response.is_empty() {
            return None;
        }
        Some(ConversationPair {
            query,
            response,
            brand: brand.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientDataset {
    pub client_id: String,
    pub train: Vec<ConversationPair>,
    pub validation: Vec<ConversationPair>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Last 20% of `pairs` (in the given order) becomes validation.
    pub fn split(client_id: impl Into<String>, mut pairs: Vec<ConversationPair>) -> Self {
        let n_val = (pairs.len() as f64 * VALIDATION_FRACTION).round() as usize;
        let validation = pairs.split_off(pairs.len() - n_val);
        ClientDataset {
            client_id: client_id.into(),
            train: pairs,
            validation,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedRecords {
    pub records: Vec<RawTweetRecord>,
    pub skipped: usize,
}

pub fn load_records(path: impl AsRef<Path>) -> Result<LoadedRecords, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_records(file)
}

pub fn read_records(input: impl std::io::Read) -> Result<LoadedRecords, DataError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let mut index = [0usize; 7];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::Schema(name.to_string()))?;
    }

    let mut out = LoadedRecords::default();
    for row in reader.records() {
        let Ok(row) = row else {
            out.skipped += 1;
            continue;
        };
        match parse_row(&row, &index) {
            Some(r) => out.records.push(r),
            None => out.skipped += 1,
        }
    }
    if out.skipped > 0 {
        log::warn!("skipped {} malformed rows", out.skipped);
    }
    Ok(out)
}

fn parse_row(row: &csv::StringRecord, index: &[usize; 7]) -> Option<RawTweetRecord> {
    let field = |i: usize| row.get(index[i]).map(str::trim);
    let optional = |i: usize| field(i).filter(|s| !s.is_empty()).map(str::to_string);
    let tweet_id = field(0).filter(|s| !s.is_empty())?;
    let text = field(4).filter(|s| !s.is_empty())?;
    let inbound = match field(2)?.to_ascii_lowercase().as_str() {
        "true" | "1" => true,
        "false" | "0" => false,
        _ => return None,
    };
    Some(RawTweetRecord {
        tweet_id: tweet_id.to_string(),
        author_id: field(1)?.to_string(),
        inbound,
        created_at: field(3).unwrap_or_default().to_string(),
        text: text.to_string(),
        response_tweet_id: optional(5),
        in_response_to_tweet_id: optional(6),
    })
}

/// One pair per inbound record whose first listed reply is a company tweet.
pub fn pair_conversations(records: &[RawTweetRecord]) -> Vec<ConversationPair> {
    let by_id: HashMap<&str, &RawTweetRecord> =
        records.iter().map(|r| (r.tweet_id.as_str(), r)).collect();
    records
        .iter()
        .filter(|r| r.inbound)
        .filter_map(|r| {
            // Replies can be listed comma separated; the first one wins.
            let first = r.response_tweet_id.as_deref()?.split(',').next()?.trim();
            let reply = by_id.get(first).filter(|reply| !reply.inbound)?;
            ConversationPair::normalized(&r.text, &reply.text, &reply.author_id)
        })
        .collect()
}

/// Seeded shuffle, `k` contiguous chunks, then a per-chunk validation split.
pub fn partition(
    pairs: &[ConversationPair],
    k: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>, DataError> {
    if k == 0 || k > pairs.len() {
        return Err(DataError::Contract(format!(
            "cannot split {} pairs across {k} clients",
            pairs.len()
        )));
    }
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (base, extra) = (shuffled.len() / k, shuffled.len() % k);
    let mut rest = shuffled.into_iter();
    Ok((0..k)
        .map(|i| {
            let size = base + usize::from(i < extra);
            ClientDataset::split(client_name(i), rest.by_ref().take(size).collect())
        })
        .collect())
}

pub fn client_name(i: usize) -> String {
    format!("client-{i:02}")
}

/// One client per brand, brands in order of first appearance.
pub fn partition_by_brand(pairs: &[ConversationPair]) -> Result<Vec<ClientDataset>, DataError> {
    let mut groups: indexmap::IndexMap<&str, Vec<ConversationPair>> = indexmap::IndexMap::new();
    for p in pairs {
        groups.entry(p.brand.as_str()).or_default().push(p.clone());
    }
    if groups.is_empty() {
        return Err(DataError::Contract("no brands present".into()));
    }
    Ok(groups
        .into_iter()
        .map(|(brand, group)| {
            let ds = ClientDataset::split(sanitize_id(brand), group);
            if ds.validation.is_empty() {
                log::warn!("brand {brand:?} has too few pairs for a validation split");
            }
            ds
        })
        .collect())
}

fn sanitize_id(s: &str) -> String {
    let id: String = s
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if id.is_empty() {
        "unbranded".into()
    } else {
        id
    }
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[ConversationPair]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in pairs {
        writeln!(out, "{}\t{}", p.query, p.response).expect("write to Vec");
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<ConversationPair>, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let (query, response) = line.split_once('\t').ok_or_else(|| DataError::Tsv {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        pairs.push(ConversationPair {
            query: query.to_string(),
            response: response.to_string(),
            brand: String::new(),
        });
    }
    Ok(pairs)
}

/// Appends pairs to a TSV file, creating it when absent.
pub fn append_pairs(path: impl AsRef<Path>, pairs: &[ConversationPair]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    for p in pairs {
        writeln!(file, "{}\t{}", p.query, p.response).map_err(io_err(path))?;
    }
    Ok(())
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Writes `dir/<client_id>/{train.tsv,val.tsv,manifest.txt}`.
pub fn write_client_dir(
    dir: impl AsRef<Path>,
    ds: &ClientDataset,
    seed: u64,
) -> Result<PathBuf, DataError> {
    let client_dir = dir.as_ref().join(&ds.client_id);
    fs::create_dir_all(&client_dir).map_err(io_err(&client_dir))?;
    write_pairs(client_dir.join(TRAIN_FILE), &ds.train)?;
    write_pairs(client_dir.join(VAL_FILE), &ds.validation)?;
    let mut manifest = KvMap::new();
    manifest.set("client_id", &ds.client_id);
    manifest.set("train", ds.train.len());
    manifest.set("validation", ds.validation.len());
    manifest.set("seed", seed);
    manifest.set("train_sha256", file_sha256(client_dir.join(TRAIN_FILE))?);
    manifest.set("val_sha256", file_sha256(client_dir.join(VAL_FILE))?);
    manifest.save(client_dir.join(MANIFEST_FILE))?;
    Ok(client_dir)
}

pub fn read_client_dir(dir: impl AsRef<Path>) -> Result<ClientDataset, DataError> {
    let dir = dir.as_ref();
    let client_id = KvMap::load(dir.join(MANIFEST_FILE))
        .ok()
        .and_then(|m| m.get_str("client_id").map(str::to_string))
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "client".into());
    Ok(ClientDataset {
        client_id,
        train: read_pairs(dir.join(TRAIN_FILE))?,
        validation: read_pairs(dir.join(VAL_FILE))?,
    })
}

/// Synthetic echo pairs: the response repeats the query.
pub fn copy_task_pairs(
    words: &[String],
    n: usize,
    len: (usize, usize),
    seed: u64,
) -> Vec<ConversationPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let l = rng.gen_range(len.0..=len.1);
            let text = (0..l)
                .map(|_| {
                    words
                        .choose(&mut rng)
                        .expect("non-empty word list")
                        .as_str()
                })
                .collect::<Vec<_>>()
                .join(" ");
            ConversationPair {
                query: text.clone(),
                response: text,
                brand: "copy".into(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(q: &str) -> ConversationPair {
        ConversationPair {
            query: q.into(),
            response: q.into(),
            brand: "b".into(),
        }
    }

    #[test]
    fn split_rounds_to_nearest_pair() {
        let ds = ClientDataset::split("c", (0..10).map(|i| pair(&i.to_string())).collect());
        assert_eq!((ds.train.len(), ds.validation.len()), (8, 2));
        assert_eq!(ds.validation[0].query, "8");
        let ds = ClientDataset::split("c", vec![pair("x")]);
        assert_eq!((ds.train.len(), ds.validation.len()), (1, 0));
    }

    #[test]
    fn uneven_partition_sizes_differ_by_at_most_one() {
        let pairs: Vec<_> = (0..23).map(|i| pair(&i.to_string())).collect();
        let parts = partition(&pairs, 5, 1).unwrap();
        let sizes: Vec<_> = parts.iter().map(ClientDataset::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
    }

    #[test]
    fn sanitize_brand_ids() {
        assert_eq!(sanitize_id("Apple Support"), "Apple_Support");
        assert_eq!(sanitize_id(""), "unbranded");
    }
}
