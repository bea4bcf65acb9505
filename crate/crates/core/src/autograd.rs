//! Eager reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op computes its value immediately and records enough context on the
//! tape to propagate gradients later. A [`Graph`] lives for one forward pass;
//! parameters are read from a borrowed [`ParamStore`] and each named
//! parameter maps to a single leaf, so weights reused by several layers
//! (the shared cross-attention module) accumulate their gradients in one place.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch norm uses batch statistics.
    Train,
    /// Dropout is the identity, batch norm uses running statistics.
    Eval,
}

/// Attention weights captured during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub label: String,
    /// One `[B, queries, keys]` softmax output per head.
    pub heads: Vec<Tensor>,
    /// `[B, queries, keys]`, averaged over heads.
    pub head_mean: Tensor,
    /// `[B, queries, keys]`, element-wise maximum over heads.
    pub head_max: Tensor,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchNormUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, w: NodeId },
    BatchMatMul { a: NodeId, b: NodeId, transpose_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBroadcast { a: NodeId, b: NodeId },
    MulConst { a: NodeId, mask: Tensor },
    Scale { a: NodeId, c: f64 },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    Concat { parts: Vec<NodeId> },
    Slice { a: NodeId, start: usize },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Gather { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, pad: usize, probs: Tensor, count: usize },
    WeightedSum { a: NodeId, w: Tensor },
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_ids: HashMap<String, NodeId>,
    mode: Mode,
    rng: ChaCha8Rng,
    recorder: Option<Vec<AttentionRecord>>,
    bn_updates: Vec<BatchNormUpdate>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Self::with_seed(params, mode, 0)
    }

    /// The seed drives dropout masks in training mode.
    pub fn with_seed(params: &'p ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_ids: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            recorder: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn enable_recording(&mut self) {
        self.recorder = Some(Vec::new());
    }

    pub fn is_recording(&self) -> bool {
        self.recorder.is_some()
    }

    pub fn record_attention(&mut self, record: AttentionRecord) {
        if let Some(rec) = self.recorder.as_mut() {
            rec.push(record);
        }
    }

    pub fn take_records(&mut self) -> Vec<AttentionRecord> {
        self.recorder.take().unwrap_or_default()
    }

    pub fn push_bn_update(&mut self, update: BatchNormUpdate) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BatchNormUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A differentiable leaf (an input whose gradient is wanted).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a named parameter. Repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let id = self.push(value, Op::Leaf, true);
        self.param_ids.insert(name.to_string(), id);
        id
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(&self, name: &str) -> &'p Tensor {
        self.params
            .buffer(name)
            .unwrap_or_else(|| panic!("unknown buffer `{name}`"))
    }

    /// `[..., K] x [K, M] -> [..., M]`
    pub fn matmul(&mut self, a: NodeId, w: NodeId) -> NodeId {
        let (av, wv) = (self.value(a), self.value(w));
        assert_eq!(wv.rank(), 2, "matmul weight must be 2-d");
        let k = av.last_dim();
        assert_eq!(k, wv.shape()[0], "matmul inner dim {:?} x {:?}", av.shape(), wv.shape());
        let m = wv.shape()[1];
        let rows = av.rows();
        let mut out = vec![0.0; rows * m];
        matmul_into(av.data(), wv.data(), &mut out, rows, k, m);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let ng = self.ng(&[a, w]);
        self.push(Tensor::new(shape, out), Op::MatMul { a, w }, ng)
    }

    /// Batched product of `[B, R, K]` with `[B, K, M]` (or `[B, M, K]` when
    /// `transpose_b`).
    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rank(), 3, "bmm lhs must be 3-d");
        assert_eq!(bv.rank(), 3, "bmm rhs must be 3-d");
        let (batch, r, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], batch, "bmm batch mismatch");
        let m = if transpose_b {
            assert_eq!(bv.shape()[2], k, "bmm inner mismatch");
            bv.shape()[1]
        } else {
            assert_eq!(bv.shape()[1], k, "bmm inner mismatch");
            bv.shape()[2]
        };
        let mut out = vec![0.0; batch * r * m];
        for bi in 0..batch {
            let asl = &av.data()[bi * r * k..(bi + 1) * r * k];
            let bsl = &bv.data()[bi * k * m..(bi + 1) * k * m];
            let osl = &mut out[bi * r * m..(bi + 1) * r * m];
            if transpose_b {
                matmul_nt_into(asl, bsl, osl, r, k, m);
            } else {
                matmul_into(asl, bsl, osl, r, k, m);
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(
            Tensor::new(vec![batch, r, m], out),
            Op::BatchMatMul { a, b, transpose_b },
            ng,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds `b` to `a`, broadcasting over the leading axes of `a`. The shape
    /// of `b` must be a suffix of the shape of `a`.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        assert!(
            bsh.len() <= ash.len() && ash[ash.len() - bsh.len()..] == *bsh,
            "cannot broadcast {bsh:?} onto {ash:?}"
        );
        let inner = bv.len();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let v = Tensor::new(ash.to_vec(), out);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::AddBroadcast { a, b }, ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale { a, c }, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 });
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Inverted dropout; the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: NodeId, p: f64) -> NodeId {
        if self.mode == Mode::Eval || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::new(shape, mask);
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        let ng = self.ng(&[a]);
        self.push(v, Op::MulConst { a, mask }, ng)
    }

    /// Softmax over the last axis. With `causal`, the last two axes are read
    /// as `[queries, keys]` and keys after the query index receive weight 0
    /// (an additive `-inf` mask).
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> NodeId {
        let av = self.value(a);
        let cols = av.last_dim();
        let rows_per_mat = if av.rank() >= 2 { av.shape()[av.rank() - 2] } else { 1 };
        let mut out = vec![0.0; av.len()];
        for (r, (orow, xrow)) in out.chunks_mut(cols).zip(av.data().chunks(cols)).enumerate() {
            let limit = if causal { (r % rows_per_mat + 1).min(cols) } else { cols };
            softmax_row(&xrow[..limit], &mut orow[..limit]);
        }
        let v = Tensor::new(av.shape().to_vec(), out);
        let ng = self.ng(&[a]);
        self.push(v, Op::Softmax(a), ng)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let d = xv.last_dim();
        assert_eq!(self.value(gamma).len(), d, "layer norm scale size");
        assert_eq!(self.value(beta).len(), d, "layer norm shift size");
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % d] + bv[i % d])
            .collect();
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::new(shape.clone(), out),
            Op::LayerNorm { x, gamma, beta, xhat: Tensor::new(shape, xhat), inv_std },
            ng,
        )
    }

    /// Batch normalization over every axis but the last (channels).
    ///
    /// `running` selects evaluation-mode statistics; `None` normalizes with
    /// the statistics of the batch itself.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> NodeId {
        let xv = self.value(x);
        let c = xv.last_dim();
        let rows = xv.rows();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => channel_moments(xv),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        for r in 0..rows {
            for ch in 0..c {
                xhat[r * c + ch] = (xv.data()[r * c + ch] - mean[ch]) * inv_std[ch];
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % c] + bv[i % c])
            .collect();
        let shape = xv.shape().to_vec();
        let xhat = Tensor::new(shape.clone(), xhat);
        let op = if running.is_some() {
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std }
        } else {
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }
        };
        let ng = self.ng(&[x, gamma, beta]);
        self.push(Tensor::new(shape, out), op, ng)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.value(parts[0]);
        let lead = &first.shape()[..first.rank() - 1];
        let rows = first.rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[..v.rank() - 1], lead, "concat leading shape mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ng = self.ng(parts);
        self.push(Tensor::new(shape, out), Op::Concat { parts: parts.to_vec() }, ng)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        let d = av.last_dim();
        assert!(start + len <= d, "slice out of range");
        let mut out = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(&[a]);
        self.push(Tensor::new(shape, out), Op::Slice { a, start }, ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).clone().reshape(shape);
        let ng = self.ng(&[a]);
        self.push(v, Op::Reshape(a), ng)
    }

    /// 2-d convolution on `[B, H, W, Cin]` with weights `[kh, kw, Cin, Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), stride, pad);
        assert_eq!(bv.len(), geo.cout, "conv bias size");
        let mut out = vec![0.0; geo.batch * geo.ho * geo.wo * geo.cout];
        for bi in 0..geo.batch {
            for oy in 0..geo.ho {
                for ox in 0..geo.wo {
                    let o0 = ((bi * geo.ho + oy) * geo.wo + ox) * geo.cout;
                    let orow = &mut out[o0..o0 + geo.cout];
                    orow.copy_from_slice(bv.data());
                    for ky in 0..geo.kh {
                        for kx in 0..geo.kw {
                            let Some((iy, ix)) = geo.input_pos(oy, ox, ky, kx) else {
                                continue;
                            };
                            let i0 = ((bi * geo.h + iy) * geo.w + ix) * geo.cin;
                            let w0 = (ky * geo.kw + kx) * geo.cin * geo.cout;
                            matmul_into(
                                &xv.data()[i0..i0 + geo.cin],
                                &wv.data()[w0..w0 + geo.cin * geo.cout],
                                orow,
                                1,
                                geo.cin,
                                geo.cout,
                            );
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![geo.batch, geo.ho, geo.wo, geo.cout], out);
        let ng = self.ng(&[x, w, b]);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Row lookup: `table[ids[i]]` for every id, reshaped to `shape`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize], shape: &[usize]) -> NodeId {
        let tv = self.value(table);
        let e = tv.last_dim();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            assert!(id < tv.rows(), "gather index {id} out of range");
            out.extend_from_slice(tv.row(id));
        }
        let v = Tensor::new(shape.to_vec(), out);
        assert_eq!(v.last_dim(), e);
        let ng = self.ng(&[table]);
        self.push(v, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    /// Mean token cross-entropy over rows whose target is not `pad`.
    /// Returns `None` when every target is padding.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], pad: usize) -> Option<NodeId> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            softmax_row(lv.row(r), &mut probs[r * v..(r + 1) * v]);
            if t == pad {
                continue;
            }
            assert!(t < v, "target {t} outside vocabulary of {v}");
            total -= log_softmax_at(lv.row(r), t);
            count += 1;
        }
        if count == 0 {
            return None;
        }
        let probs = Tensor::new(lv.shape().to_vec(), probs);
        let ng = self.ng(&[logits]);
        Some(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad, probs, count },
            ng,
        ))
    }

    /// `sum(a * w)` for a constant weight tensor; a convenient scalar probe.
    pub fn weighted_sum(&mut self, a: NodeId, w: Tensor) -> NodeId {
        let v = self.value(a).zip_map(&w, |x, y| x * y).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(v), Op::WeightedSum { a, w }, ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![1.0]));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        let param_grads = self
            .param_ids
            .iter()
            .map(|(name, id)| {
                let g = grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()));
                (name.clone(), g)
            })
            .collect();
        Gradients { nodes: grads, params: param_grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, w } => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let (k, m, rows) = (wv.shape()[0], wv.shape()[1], av.rows());
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; rows * k];
                    matmul_nt_into(g.data(), wv.data(), &mut ga, rows, m, k);
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), ga));
                }
                if self.nodes[w.0].needs_grad {
                    let mut gw = vec![0.0; k * m];
                    matmul_tn_into(av.data(), g.data(), &mut gw, rows, k, m);
                    self.acc(grads, *w, Tensor::new(vec![k, m], gw));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, r, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let m = out.shape()[2];
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for bi in 0..batch {
                    let asl = &av.data()[bi * r * k..(bi + 1) * r * k];
                    let bsl = &bv.data()[bi * k * m..(bi + 1) * k * m];
                    let gsl = &g.data()[bi * r * m..(bi + 1) * r * m];
                    let gasl = &mut ga[bi * r * k..(bi + 1) * r * k];
                    let gbsl = &mut gb[bi * k * m..(bi + 1) * k * m];
                    if *transpose_b {
                        // out = a b^T, b is [m, k]
                        matmul_into(gsl, bsl, gasl, r, m, k);
                        matmul_tn_into(gsl, asl, gbsl, r, m, k);
                    } else {
                        matmul_nt_into(gsl, bsl, gasl, r, m, k);
                        matmul_tn_into(asl, gsl, gbsl, r, k, m);
                    }
                }
                self.acc(grads, *a, Tensor::new(av.shape().to_vec(), ga));
                self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), gb));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g.zip_map(bv, |x, y| x * y));
                self.acc(grads, *b, g.zip_map(av, |x, y| x * y));
            }
            Op::AddBroadcast { a, b } => {
                self.acc(grads, *a, g.clone());
                let bv = self.value(*b);
                let inner = bv.len();
                let mut gb = vec![0.0; inner];
                for chunk in g.data().chunks(inner) {
                    for (o, &x) in gb.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), gb));
            }
            Op::MulConst { a, mask } => self.acc(grads, *a, g.zip_map(mask, |x, m| x * m)),
            Op::Scale { a, c } => self.acc(grads, *a, g.map(|x| x * c)),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, g.zip_map(av, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::Softmax(a) => {
                let cols = out.last_dim();
                let mut ga = vec![0.0; out.len()];
                for ((grow, yrow), orow) in g
                    .data()
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(ga.chunks_mut(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = y * (gv - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(out.shape().to_vec(), ga));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = out.last_dim();
                let gv = self.value(*gamma).data();
                let mut gx = vec![0.0; out.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let grow = g.row(r);
                    let hrow = xhat.row(r);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                        ggamma[j] += grow[j] * hrow[j];
                        gbeta[j] += grow[j];
                    }
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        gx[r * d + j] = inv / d as f64 * (d as f64 * dh - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), gx));
                self.acc(grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), ggamma));
                self.acc(grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), gbeta));
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let c = out.last_dim();
                let rows = out.rows();
                let gv = self.value(*gamma).data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut sum_dh = vec![0.0; c];
                let mut sum_dh_h = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let gi = g.data()[r * c + ch];
                        let h = xhat.data()[r * c + ch];
                        ggamma[ch] += gi * h;
                        gbeta[ch] += gi;
                        sum_dh[ch] += gi * gv[ch];
                        sum_dh_h[ch] += gi * gv[ch] * h;
                    }
                }
                let m = rows as f64;
                let mut gx = vec![0.0; out.len()];
                for r in 0..rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        let dh = g.data()[i] * gv[ch];
                        gx[i] = inv_std[ch] / m
                            * (m * dh - sum_dh[ch] - xhat.data()[i] * sum_dh_h[ch]);
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), gx));
                self.acc(grads, *gamma, Tensor::new(vec![c], ggamma));
                self.acc(grads, *beta, Tensor::new(vec![c], gbeta));
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let c = out.last_dim();
                let gv = self.value(*gamma).data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; out.len()];
                for (i, (&gi, &h)) in g.data().iter().zip(xhat.data()).enumerate() {
                    let ch = i % c;
                    ggamma[ch] += gi * h;
                    gbeta[ch] += gi;
                    gx[i] = gi * gv[ch] * inv_std[ch];
                }
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), gx));
                self.acc(grads, *gamma, Tensor::new(vec![c], ggamma));
                self.acc(grads, *beta, Tensor::new(vec![c], gbeta));
            }
            Op::Concat { parts } => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.last_dim();
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Vec::with_capacity(pv.len());
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(grads, p, Tensor::new(pv.shape().to_vec(), gp));
                    }
                    offset += w;
                }
            }
            Op::Slice { a, start } => {
                let av = self.value(*a);
                let d = av.last_dim();
                let len = out.last_dim();
                let mut ga = vec![0.0; av.len()];
                for r in 0..av.rows() {
                    ga[r * d + start..r * d + start + len].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, Tensor::new(av.shape().to_vec(), ga));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.clone().reshape(&shape));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geo = ConvGeometry::new(xv.shape(), wv.shape(), *stride, *pad);
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; geo.cout];
                for bi in 0..geo.batch {
                    for oy in 0..geo.ho {
                        for ox in 0..geo.wo {
                            let o0 = ((bi * geo.ho + oy) * geo.wo + ox) * geo.cout;
                            let grow = &g.data()[o0..o0 + geo.cout];
                            for (acc, &v) in gb.iter_mut().zip(grow) {
                                *acc += v;
                            }
                            for ky in 0..geo.kh {
                                for kx in 0..geo.kw {
                                    let Some((iy, ix)) = geo.input_pos(oy, ox, ky, kx) else {
                                        continue;
                                    };
                                    let i0 = ((bi * geo.h + iy) * geo.w + ix) * geo.cin;
                                    let w0 = (ky * geo.kw + kx) * geo.cin * geo.cout;
                                    let wsl = &wv.data()[w0..w0 + geo.cin * geo.cout];
                                    matmul_nt_into(grow, wsl, &mut gx[i0..i0 + geo.cin], 1, geo.cout, geo.cin);
                                    matmul_tn_into(
                                        &xv.data()[i0..i0 + geo.cin],
                                        grow,
                                        &mut gw[w0..w0 + geo.cin * geo.cout],
                                        1,
                                        geo.cin,
                                        geo.cout,
                                    );
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                self.acc(grads, *w, Tensor::new(wv.shape().to_vec(), gw));
                self.acc(grads, *b, Tensor::new(vec![geo.cout], gb));
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let e = tv.last_dim();
                let mut gt = vec![0.0; tv.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        gt[id * e + j] += g.data()[i * e + j];
                    }
                }
                self.acc(grads, *table, Tensor::new(tv.shape().to_vec(), gt));
            }
            Op::CrossEntropy { logits, targets, pad, probs, count } => {
                let v = probs.last_dim();
                let scale = g.data()[0] / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    for j in 0..v {
                        gl[r * v + j] = probs.data()[r * v + j] * scale;
                    }
                    gl[r * v + t] -= scale;
                }
                self.acc(grads, *logits, Tensor::new(probs.shape().to_vec(), gl));
            }
            Op::WeightedSum { a, w } => {
                let s = g.data()[0];
                self.acc(grads, *a, w.map(|x| x * s));
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a node; zeros when it did not influence the root.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(xs.len(), 4, "conv input must be [B, H, W, C]");
        assert_eq!(ws.len(), 4, "conv weight must be [kh, kw, Cin, Cout]");
        assert_eq!(xs[3], ws[2], "conv channel mismatch");
        assert!(stride >= 1);
        let (h, w, kh, kw) = (xs[1], xs[2], ws[0], ws[1]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv kernel larger than input");
        Self {
            batch: xs[0],
            h,
            w,
            cin: xs[3],
            kh,
            kw,
            cout: ws[3],
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        }
    }

    fn input_pos(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_at(x: &[f64], idx: usize) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x[idx] - lse
}

fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = x.last_dim();
    let rows = x.rows() as f64;
    let mut mean = vec![0.0; c];
    for (i, v) in x.data().iter().enumerate() {
        mean[i % c] += v;
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; c];
    for (i, v) in x.data().iter().enumerate() {
        var[i % c] += (v - mean[i % c]).powi(2);
    }
    var.iter_mut().for_each(|v| *v /= rows);
    (mean, var)
}

/// Per-channel mean and biased variance over every axis but the last.
pub fn batch_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    channel_moments(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 1.0, &mut rng)
    }

    fn probe(shape: &[usize]) -> Tensor {
        rand_t(shape, 99)
    }

    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
        let store = ParamStore::default();
        let report = check_gradients(&store, &inputs, &GradCheckOptions::default(), |g, ids| Ok(f(g, ids)))
            .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn matmul_and_bmm_gradients() {
        check(vec![rand_t(&[2, 3, 4], 1), rand_t(&[4, 5], 2)], |g, ids| {
            let y = g.matmul(ids[0], ids[1]);
            g.weighted_sum(y, probe(&[2, 3, 5]))
        });
        check(vec![rand_t(&[2, 3, 4], 1), rand_t(&[2, 5, 4], 2)], |g, ids| {
            let y = g.bmm(ids[0], ids[1], true);
            g.weighted_sum(y, probe(&[2, 3, 5]))
        });
        check(vec![rand_t(&[2, 3, 4], 1), rand_t(&[2, 4, 5], 2)], |g, ids| {
            let y = g.bmm(ids[0], ids[1], false);
            g.weighted_sum(y, probe(&[2, 3, 5]))
        });
    }

    #[test]
    fn normalization_gradients() {
        check(vec![rand_t(&[3, 5], 3), rand_t(&[5], 4), rand_t(&[5], 5)], |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            g.weighted_sum(y, probe(&[3, 5]))
        });
        check(vec![rand_t(&[2, 2, 2, 3], 3), rand_t(&[3], 4), rand_t(&[3], 5)], |g, ids| {
            let y = g.batch_norm(ids[0], ids[1], ids[2], None, 1e-5);
            g.weighted_sum(y, probe(&[2, 2, 2, 3]))
        });
        let (m, v) = (vec![0.1, -0.2, 0.3], vec![1.5, 0.5, 2.0]);
        check(vec![rand_t(&[4, 3], 3), rand_t(&[3], 4), rand_t(&[3], 5)], |g, ids| {
            let y = g.batch_norm(ids[0], ids[1], ids[2], Some((&m, &v)), 1e-5);
            g.weighted_sum(y, probe(&[4, 3]))
        });
    }

    #[test]
    fn softmax_and_pointwise_gradients() {
        check(vec![rand_t(&[2, 3, 3], 6)], |g, ids| {
            let y = g.softmax(ids[0], true);
            let z = g.sigmoid(y);
            g.weighted_sum(z, probe(&[2, 3, 3]))
        });
        check(vec![rand_t(&[4, 6], 7), rand_t(&[6], 8)], |g, ids| {
            let y = g.add_broadcast(ids[0], ids[1]);
            let a = g.slice_last(y, 1, 3);
            let b = g.slice_last(y, 3, 3);
            let c = g.mul(a, b);
            let d = g.concat(&[c, a]);
            let e = g.scale(d, 0.7);
            let f = g.sub(e, d);
            g.weighted_sum(f, probe(&[4, 6]))
        });
    }

    #[test]
    fn conv_gather_and_cross_entropy_gradients() {
        check(vec![rand_t(&[2, 5, 5, 2], 9), rand_t(&[3, 3, 2, 3], 10), rand_t(&[3], 11)], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1);
            g.weighted_sum(y, probe(&[2, 3, 3, 3]))
        });
        check(vec![rand_t(&[5, 4], 12)], |g, ids| {
            let y = g.gather(ids[0], &[1, 3, 1, 0], &[2, 2, 4]);
            g.cross_entropy(y, &[0, 2, 3, 1], 2).unwrap()
        });
    }

    #[test]
    fn causal_softmax_masks_future_keys() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(rand_t(&[1, 3, 3], 1));
        let y = g.softmax(x, true);
        let v = g.value(y);
        assert_eq!(v.data()[0], 1.0);
        assert_eq!(v.data()[1], 0.0);
        assert_eq!(v.data()[2], 0.0);
        assert_eq!(v.data()[5], 0.0);
        for r in 0..3 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_param_accumulates_gradient() {
        let mut store = ParamStore::default();
        store.insert("w", Tensor::new(vec![1, 1], vec![2.0]));
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::new(vec![1, 1], vec![3.0]));
        let w1 = g.param("w");
        let w2 = g.param("w");
        assert_eq!(w1, w2);
        let a = g.matmul(x, w1);
        let b = g.matmul(x, w2);
        let s = g.add(a, b);
        let l = g.weighted_sum(s, Tensor::ones(&[1, 1]));
        let grads = g.backward(l);
        assert_eq!(grads.param("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn all_pad_cross_entropy_is_none() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.cross_entropy(x, &[2, 2], 2).is_none());
    }
}
