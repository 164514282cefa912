//! Named-parameter archive.
//!
//! Layout: the 8-byte magic `GVSCKPT1`, a little-endian `u64` header
//! length, a JSON header, then every tensor's values as little-endian
//! `f64` in header order. The header carries the network spec, seed, epoch
//! and config hash alongside a directory of `(set/name, shape, trainable)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"GVSCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: Value,
    pub seed: u64,
    pub epoch: u64,
    pub config_hash: String,
    #[serde(default)]
    pub meta: Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    set: String,
    name: String,
    shape: [usize; 4],
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    #[serde(flatten)]
    header: CheckpointHeader,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub sets: Vec<ParamSet>,
}

impl Checkpoint {
    pub fn set(&self, label: &str) -> Option<&ParamSet> {
        self.sets.iter().find(|s| s.label() == label)
    }

    /// Loads the set `label` into `target`, validating shape for shape.
    pub fn restore_into(&self, label: &str, target: &mut ParamSet) -> Result<()> {
        let src = self
            .set(label)
            .ok_or_else(|| Error::Checkpoint(format!("archive has no `{label}` set")))?;
        target.load_from(src)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        for set in &self.sets {
            for e in set.entries() {
                tensors.push(TensorEntry {
                    set: set.label().to_string(),
                    name: e.name.clone(),
                    shape: e.value.shape(),
                    trainable: e.trainable,
                });
            }
        }
        let header = serde_json::to_vec(&RawHeader {
            header: self.header.clone(),
            tensors,
        })?;
        let payload: usize = self.sets.iter().map(|s| s.num_scalars()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for set in &self.sets {
            for e in set.entries() {
                for v in e.value.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let raw: RawHeader = serde_json::from_slice(body)?;
        let mut cursor = 16 + hlen;
        let mut sets: Vec<ParamSet> = Vec::new();
        for t in raw.tensors {
            let n: usize = t.shape.iter().product();
            let end = cursor + 8 * n;
            let chunk = bytes
                .get(cursor..end)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor `{}`", t.name)))?;
            cursor = end;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Tensor::from_vec(t.shape, data);
            if !value.all_finite() {
                return Err(Error::Checkpoint(format!("non-finite values in `{}`", t.name)));
            }
            let set = match sets.iter_mut().position(|s| s.label() == t.set) {
                Some(i) => &mut sets[i],
                None => {
                    sets.push(ParamSet::new(t.set.clone()));
                    sets.last_mut().expect("just pushed")
                }
            };
            set.push(t.name, value, t.trainable);
        }
        if cursor != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Checkpoint {
            header: raw.header,
            sets,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
