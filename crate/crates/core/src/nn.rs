//! Layer building blocks shared by the encoder, enhancement and decoder.
//!
//! Layers here are plain name bundles: weights live in a [`ParamStore`] and a
//! layer only knows which names to read. Two layers built with the same
//! prefix therefore share parameters.

use rand::Rng;

use crate::autograd::{batch_moments, AttentionRecord, BatchNormUpdate, Graph, Mode, NodeId};
use crate::error::{Error, Result};
use crate::params::{init_uniform, ParamStore};
use crate::tensor::Tensor;

/// Multi-head scaled dot-product attention with per-head projections stored
/// column-blocked: head `i` owns columns `i*dk..(i+1)*dk` of `w_q`, `w_k`
/// and `w_v`, and rows `i*dk..(i+1)*dk` of `w_o`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub w_q: String,
    pub w_k: String,
    pub w_v: String,
    pub w_o: String,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, heads: usize) -> Self {
        Self {
            w_q: format!("{prefix}.w_q"),
            w_k: format!("{prefix}.w_k"),
            w_v: format!("{prefix}.w_v"),
            w_o: format!("{prefix}.w_o"),
            heads,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, dim: usize, rng: &mut R) {
        for name in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            store.insert(name.clone(), init_uniform(&[dim, dim], dim, rng));
        }
    }

    pub fn param_count(dim: usize) -> usize {
        4 * dim * dim
    }

    /// `query: [B, Nq, D]`, `memory: [B, Nk, D]` -> `[B, Nq, D]`.
    ///
    /// With `causal`, query `i` only sees keys `0..=i`. When the graph is
    /// recording, the softmax weights are stored under `label`.
    pub fn forward(
        &self,
        g: &mut Graph,
        query: NodeId,
        memory: NodeId,
        causal: bool,
        label: &str,
    ) -> Result<NodeId> {
        let (qs, ms) = (g.shape(query).to_vec(), g.shape(memory).to_vec());
        if qs.len() != 3 || ms.len() != 3 {
            return Err(Error::Shape(format!(
                "attention expects [B, N, D] inputs, got {qs:?} and {ms:?}"
            )));
        }
        if qs[0] != ms[0] || qs[2] != ms[2] {
            return Err(Error::Shape(format!(
                "attention source {qs:?} and target {ms:?} disagree on batch or channels"
            )));
        }
        if ms[1] == 0 {
            return Err(Error::Shape("attention target has no rows".into()));
        }
        let dim = qs[2];
        if dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "channel dim {dim} not divisible by {} heads",
                self.heads
            )));
        }
        if !g.value(query).all_finite() || !g.value(memory).all_finite() {
            return Err(Error::NonFinite("attention input".into()));
        }
        let dk = dim / self.heads;
        let w_q = g.param(&self.w_q);
        let w_k = g.param(&self.w_k);
        let w_v = g.param(&self.w_v);
        let w_o = g.param(&self.w_o);
        let q = g.matmul(query, w_q);
        let k = g.matmul(memory, w_k);
        let v = g.matmul(memory, w_v);

        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_last(q, h * dk, dk);
            let kh = g.slice_last(k, h * dk, dk);
            let vh = g.slice_last(v, h * dk, dk);
            let scores = g.bmm(qh, kh, true);
            let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
            let attn = g.softmax(scores, causal);
            weights.push(attn);
            head_outputs.push(g.bmm(attn, vh, false));
        }
        if g.is_recording() {
            let record = aggregate_heads(g, &weights, label);
            g.record_attention(record);
        }
        let z = g.concat(&head_outputs);
        Ok(g.matmul(z, w_o))
    }
}

fn aggregate_heads(g: &Graph, weights: &[NodeId], label: &str) -> AttentionRecord {
    let first = g.value(weights[0]);
    let mut mean = Tensor::zeros(first.shape());
    let mut max = Tensor::full(first.shape(), f64::NEG_INFINITY);
    for &w in weights {
        let v = g.value(w);
        mean.add_assign(v);
        max = max.zip_map(v, f64::max);
    }
    let n = weights.len() as f64;
    AttentionRecord {
        label: label.to_string(),
        heads: weights.iter().map(|&w| g.value(w).clone()).collect(),
        head_mean: mean.map(|x| x / n),
        head_max: max,
    }
}

/// Position-wise `max(0, x W1) W2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: String,
    pub w2: String,
}

impl FeedForward {
    pub fn new(prefix: &str) -> Self {
        Self {
            w1: format!("{prefix}.w1"),
            w2: format!("{prefix}.w2"),
        }
    }

    /// Hidden width is `4 * dim`.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, dim: usize, rng: &mut R) {
        store.insert(self.w1.clone(), init_uniform(&[dim, 4 * dim], dim, rng));
        store.insert(self.w2.clone(), init_uniform(&[4 * dim, dim], 4 * dim, rng));
    }

    pub fn param_count(dim: usize) -> usize {
        8 * dim * dim
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w1 = g.param(&self.w1);
        let w2 = g.param(&self.w2);
        let h = g.matmul(x, w1);
        let h = g.relu(h);
        g.matmul(h, w2)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(prefix: &str, eps: f64) -> Self {
        Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            eps,
        }
    }

    pub fn init(&self, store: &mut ParamStore, dim: usize) {
        store.insert(self.gamma.clone(), Tensor::ones(&[dim]));
        store.insert(self.beta.clone(), Tensor::zeros(&[dim]));
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Batch normalization over channels (last axis). Running statistics live in
/// the store's buffers; training-mode calls queue a [`BatchNormUpdate`] on the
/// graph which [`apply_bn_updates`] folds in after the optimizer step.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub prefix: String,
    /// Prefix of the running statistics; equals `prefix` unless the layer's
    /// affine parameters are shared across call sites.
    pub stats: String,
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(prefix: &str, eps: f64) -> Self {
        Self {
            prefix: prefix.to_string(),
            stats: prefix.to_string(),
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            running_mean: format!("{prefix}.running_mean"),
            running_var: format!("{prefix}.running_var"),
            eps,
        }
    }

    /// Same affine parameters, separate running statistics under `stats`.
    pub fn with_stats(&self, stats: &str) -> Self {
        Self {
            stats: stats.to_string(),
            running_mean: format!("{stats}.running_mean"),
            running_var: format!("{stats}.running_var"),
            ..self.clone()
        }
    }

    pub fn init(&self, store: &mut ParamStore, channels: usize) {
        self.init_affine(store, channels);
        self.init_stats(store, channels);
    }

    pub fn init_affine(&self, store: &mut ParamStore, channels: usize) {
        store.insert(self.gamma.clone(), Tensor::ones(&[channels]));
        store.insert(self.beta.clone(), Tensor::zeros(&[channels]));
    }

    pub fn init_stats(&self, store: &mut ParamStore, channels: usize) {
        store.insert_buffer(self.running_mean.clone(), Tensor::zeros(&[channels]));
        store.insert_buffer(self.running_var.clone(), Tensor::ones(&[channels]));
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        match g.mode() {
            Mode::Eval => {
                let mean = g.buffer(&self.running_mean).data();
                let var = g.buffer(&self.running_var).data();
                g.batch_norm(x, gamma, beta, Some((mean, var)), self.eps)
            }
            Mode::Train => {
                let (mean, var) = batch_moments(g.value(x));
                g.push_bn_update(BatchNormUpdate {
                    prefix: self.stats.clone(),
                    mean,
                    var,
                });
                g.batch_norm(x, gamma, beta, None, self.eps)
            }
        }
    }
}

/// `running = (1 - momentum) * running + momentum * batch` for every update,
/// in the order they were recorded.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BatchNormUpdate], momentum: f64) {
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let name = format!("{}.{suffix}", u.prefix);
            if let Some(buf) = store.buffer_mut(&name) {
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }
}

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    pub fn new(prefix: &str) -> Self {
        Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, fan_in: usize, fan_out: usize, rng: &mut R) {
        store.insert(self.w.clone(), init_uniform(&[fan_in, fan_out], fan_in, rng));
        store.insert(self.b.clone(), Tensor::zeros(&[fan_out]));
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let y = g.matmul(x, w);
        g.add_broadcast(y, b)
    }
}

/// Fixed sinusoidal table `[positions, dim]`:
/// `PE(p, 2i) = sin(p / 10000^(2i/dim))`, `PE(p, 2i+1) = cos(...)`.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; positions * dim];
    for p in 0..positions {
        for i in 0..dim {
            let pair = (i / 2) as f64 * 2.0;
            let angle = p as f64 / 10000f64.powf(pair / dim as f64);
            data[p * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![positions, dim], data)
}
