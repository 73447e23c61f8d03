//! Named tensor collections and their on-disk archive.
//!
//! Archive layout:
//!
//! ```text
//! FEDCSR-TENSORS\n                 magic line
//! <manifest JSON>\n                one line
//! <f64 little-endian payload>      tensors back to back in manifest order
//! ```
//!
//! The manifest is `{"format": "fedcsr-tensors", "version": 1, "metadata": {..},
//! "tensors": [{"name", "shape": [rows, cols], "offset", "len"}, ..]}` with
//! offsets counted in `f64` elements from the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"FEDCSR-TENSORS\n";
const FORMAT: &str = "fedcsr-tensors";
pub const ARCHIVE_VERSION: u32 = 1;

/// Tensors keyed by name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_named(items: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self {
            tensors: items.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Adds every tensor of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.tensors {
            if self.tensors.contains_key(&k) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{k}`")));
            }
            self.tensors.insert(k, v);
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, prefix kept.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        Self::from_named(
            self.tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone())),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Same names with the same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: ARCHIVE_VERSION,
            metadata,
            tensors: entries,
        };
        let mut buf = Vec::with_capacity(MAGIC.len() + 8 * offset + 256);
        buf.extend_from_slice(MAGIC);
        serde_json::to_writer(&mut buf, &manifest)?;
        buf.push(b'\n');
        for t in self.tensors.values() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Reads an archive; returns the tensors and the stored metadata.
    pub fn load(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("not a tensor archive"))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&rest[..nl])?;
        if manifest.format != FORMAT || manifest.version != ARCHIVE_VERSION {
            return Err(bad(&format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let payload = &rest[nl + 1..];
        let mut set = ParamSet::new();
        for e in manifest.tensors {
            if e.len != e.shape[0] * e.shape[1] {
                return Err(bad(&format!("tensor `{}` length disagrees with its shape", e.name)));
            }
            let start = e.offset * 8;
            let end = start + e.len * 8;
            let raw = payload.get(start..end).ok_or_else(|| bad("payload too short"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            set.insert(e.name, Tensor::from_vec(e.shape[0], e.shape[1], data)?);
        }
        Ok((set, manifest.metadata))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
}
