//! Binary checkpoint archive.
//!
//! Layout: the magic `MMCC`, a little-endian `u32` format version, a `u64`
//! header length, a JSON header, then every tensor as raw little-endian
//! `f64` in header order. Tensor maps are ordered, so saving the same state
//! always yields the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{Adam, TrainConfig};

pub const MAGIC: &[u8; 4] = b"MMCC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    pub best_sm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub train: Option<TrainConfig>,
    pub store: ParamStore,
    pub adam: Option<Adam>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: Group,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vocabulary,
    train: Option<TrainConfig>,
    adam: Option<AdamHeader>,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    fn groups(&self) -> Vec<(Group, &BTreeMap<String, Tensor>)> {
        let mut g = vec![(Group::Param, self.store.params()), (Group::Buffer, self.store.buffers())];
        if let Some(a) = &self.adam {
            g.push((Group::AdamM, &a.m));
            g.push((Group::AdamV, &a.v));
        }
        g
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let groups = self.groups();
        let tensors = groups
            .iter()
            .flat_map(|(group, map)| {
                map.iter().map(|(name, t)| TensorEntry { group: *group, name: name.clone(), shape: t.shape().to_vec() })
            })
            .collect();
        let header = Header {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            train: self.train.clone(),
            adam: self.adam.as_ref().map(|a| AdamHeader { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step }),
            meta: self.meta,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, map) in groups {
            for t in map.values() {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut data = &bytes[16 + hlen..];
        let mut store = ParamStore::default();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < n * 8 {
                return Err(corrupt(format!("truncated data for {}", e.name)));
            }
            let vals: Vec<f64> = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            let t = Tensor::new(e.shape, vals);
            match e.group {
                Group::Param => store.insert(e.name, t),
                Group::Buffer => store.insert_buffer(e.name, t),
                Group::AdamM => {
                    m.insert(e.name, t);
                }
                Group::AdamV => {
                    v.insert(e.name, t);
                }
            }
        }
        if !data.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", data.len())));
        }
        let adam = header.adam.map(|a| Adam { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step, m, v });
        Ok(Self { model: header.model, vocab: header.vocab, train: header.train, store, adam, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and checks that every parameter it expects is
    /// present with the right shape.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.model.clone(), self.vocab.len_with_specials())?;
        let fresh = model.init_store(0);
        for (name, t) in fresh.params() {
            match self.store.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(corrupt(format!("{name} has shape {:?}, expected {:?}", p.shape(), t.shape()))),
                None => return Err(corrupt(format!("missing parameter {name}"))),
            }
        }
        Ok(model)
    }
}
