//! Multi-domain interaction sequences: loading, filtering, chronological
//! splitting, synthetic scenarios, and the per-domain item graph.
//!
//! Item index 0 is the padding token in every domain; real items are
//! `1..vocab_size`. Sequences are stored oldest-first.

mod graph;
mod ingest;
mod preprocess;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{build_item_graph, ItemGraph};
pub use ingest::{ingest_amazon, IngestedDomain};
pub use preprocess::{preprocess, split_chronological, PreprocessConfig, SplitSizes};
pub use synthetic::{generate_synthetic, item_cluster, ClusterId, ScenarioConfig};

/// Reserved padding index.
pub const PAD: usize = 0;

/// Cross-domain user key.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl UserId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: UserId,
    pub items: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<i64>>,
}

impl UserSequence {
    pub fn new(user_id: impl Into<String>, items: Vec<usize>) -> Self {
        Self {
            user_id: UserId(user_id.into()),
            items,
            timestamps: None,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            user_id: self.user_id.clone(),
            items: self.items[range.clone()].to_vec(),
            timestamps: self.timestamps.as_ref().map(|ts| ts[range].to_vec()),
        }
    }
}

/// One client's private data. A dataset straight out of ingestion keeps each
/// user's whole history in `train` and leaves `valid`/`test` empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain_name: String,
    /// Number of items plus the padding slot.
    pub vocab_size: usize,
    /// Original item keys by index (index 0 is the pad); empty for synthetic data.
    #[serde(default)]
    pub item_keys: Vec<String>,
    pub train: BTreeMap<UserId, UserSequence>,
    #[serde(default)]
    pub valid: BTreeMap<UserId, UserSequence>,
    #[serde(default)]
    pub test: BTreeMap<UserId, UserSequence>,
}

const DATASET_FORMAT: &str = "fedcsr-domain-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    dataset: DomainDataset,
}

impl DomainDataset {
    /// Unsplit dataset holding whole histories.
    pub fn raw(domain_name: impl Into<String>, vocab_size: usize, sequences: Vec<UserSequence>) -> Self {
        Self {
            domain_name: domain_name.into(),
            vocab_size,
            item_keys: Vec::new(),
            train: sequences.into_iter().map(|s| (s.user_id.clone(), s)).collect(),
            valid: BTreeMap::new(),
            test: BTreeMap::new(),
        }
    }

    pub fn users(&self) -> BTreeSet<UserId> {
        self.train
            .keys()
            .chain(self.valid.keys())
            .chain(self.test.keys())
            .cloned()
            .collect()
    }

    /// `|D_k|`: number of training sequences.
    pub fn size(&self) -> usize {
        self.train.len()
    }

    pub fn num_items(&self) -> usize {
        self.vocab_size - 1
    }

    /// Whole history of a user, oldest first (train, then valid, then test).
    pub fn history(&self, user: &UserId) -> Vec<usize> {
        let mut out = Vec::new();
        for part in [&self.train, &self.valid, &self.test] {
            if let Some(s) = part.get(user) {
                out.extend_from_slice(&s.items);
            }
        }
        out
    }

    /// Whole histories with timestamps, oldest first.
    pub fn merged_sequences(&self) -> Vec<UserSequence> {
        self.users()
            .into_iter()
            .map(|u| {
                let parts: Vec<&UserSequence> = [&self.train, &self.valid, &self.test]
                    .iter()
                    .filter_map(|p| p.get(&u))
                    .collect();
                let items = parts.iter().flat_map(|s| s.items.iter().copied()).collect();
                let timestamps = if parts.iter().all(|s| s.timestamps.is_some()) {
                    Some(parts.iter().flat_map(|s| s.timestamps.clone().unwrap()).collect())
                } else {
                    None
                };
                UserSequence {
                    user_id: u,
                    items,
                    timestamps,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("domain `{}` has no items", self.domain_name)));
        }
        for part in [&self.train, &self.valid, &self.test] {
            for s in part.values() {
                for &i in &s.items {
                    if i == PAD || i >= self.vocab_size {
                        return Err(Error::Index {
                            index: i,
                            vocab: self.vocab_size,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = DatasetFile {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            dataset: self.clone(),
        };
        let w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let file: DatasetFile = serde_json::from_reader(r)?;
        if file.format != DATASET_FORMAT || file.version != DATASET_VERSION {
            return Err(Error::Data {
                path: path.to_owned(),
                message: format!("unsupported dataset format {} v{}", file.format, file.version),
            });
        }
        file.dataset.validate()?;
        Ok(file.dataset)
    }
}
