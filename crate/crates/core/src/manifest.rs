//! Record of one run: enough to repeat it and to check that inputs match.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::kv::{KvError, KvMap};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Every setting that shapes the run; hashed into `config_hash`.
    pub config: KvMap,
    pub seeds: IndexMap<String, u64>,
    /// Input file → SHA-256.
    pub datasets: IndexMap<String, String>,
    pub metrics: Vec<PathBuf>,
    /// Wall-clock seconds per round or epoch.
    pub round_seconds: Vec<f64>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        RunManifest {
            command: command.into(),
            ..Default::default()
        }
    }

    pub fn config_hash(&self) -> String {
        self.config.digest()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("command", &self.command);
        kv.set("config_hash", self.config_hash());
        for (k, v) in self.config.iter() {
            kv.set(&format!("config.{k}"), v);
        }
        for (k, v) in &self.seeds {
            kv.set(&format!("seed.{k}"), v);
        }
        for (k, v) in &self.datasets {
            kv.set(&format!("dataset.{k}"), v);
        }
        for (i, p) in self.metrics.iter().enumerate() {
            kv.set(&format!("metrics.{i}"), p.display());
        }
        let secs: Vec<String> = self
            .round_seconds
            .iter()
            .map(|s| format!("{s:.3}"))
            .collect();
        kv.set("round_seconds", secs.join(","));
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        let mut m = RunManifest::new(
            kv.get_str("command")
                .ok_or_else(|| KvError::Missing("command".into()))?,
        );
        for (k, v) in kv.iter() {
            if let Some(name) = k.strip_prefix("config.") {
                m.config.set(name, v);
            } else if let Some(name) = k.strip_prefix("seed.") {
                m.seeds.insert(name.to_string(), kv.get(k)?);
            } else if let Some(name) = k.strip_prefix("dataset.") {
                m.datasets.insert(name.to_string(), v.to_string());
            } else if k.starts_with("metrics.") {
                m.metrics.push(PathBuf::from(v));
            }
        }
        let secs = kv.get_str("round_seconds").unwrap_or("");
        m.round_seconds = secs
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| KvError::Value {
                    key: "round_seconds".into(),
                    value: s.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        if let Some(hash) = kv.get_str("config_hash") {
            if hash != m.config_hash() {
                return Err(KvError::Value {
                    key: "config_hash".into(),
                    value: hash.to_string(),
                });
            }
        }
        Ok(m)
    }

    /// Atomic: written to a temporary file, then renamed.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KvError> {
        self.to_kv().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KvError> {
        Self::from_kv(&KvMap::load(path)?)
    }
}
