//! Named parameter and buffer storage.

use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::Tensor;

/// Trainable parameters plus non-trainable buffers, keyed by dotted names.
///
/// Both maps are ordered so iteration (and therefore serialization and the
/// optimizer sweep) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count of trainable parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Scalar count of trainable parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Copies every parameter under `from` to the same suffix under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(from).map(|s| (format!("{to}{s}"), v.clone())))
            .collect();
        self.params.extend(copies);
        let buf_copies: Vec<(String, Tensor)> = self
            .buffers
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(from).map(|s| (format!("{to}{s}"), v.clone())))
            .collect();
        self.buffers.extend(buf_copies);
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

/// Zero-mean uniform initialization scaled by `1/sqrt(fan_in)`.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}
