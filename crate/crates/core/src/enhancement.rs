//! Feature enhancement between encoder and decoder.
//!
//! Two stages run in sequence. In each stage CMCA lets every grid attend to
//! the other modality at the same timestamp, then UDCA lets each result
//! attend to its modality's temporal difference:
//!
//! ```text
//! r1 = block(f1, f3)   r2 = block(f2, f4)   r3 = block(f3, f1)   r4 = block(f4, f2)
//! d_rgb = f2 - f1      d_sem = f4 - f3
//! f1' = block(r1, d_rgb)  f2' = block(r2, d_rgb)  f3' = block(r3, d_sem)  f4' = block(r4, d_sem)
//! ```
//!
//! Both roles of a stage use one cross-attention parameter set; the second
//! stage has its own and takes the first stage's outputs (differences
//! included) as input. Convolutional Blocks then fuse each modality:
//!
//! ```text
//! x_rgb = CB_rgb([f1' ; f2'])      x_rgb = CB_rgb([f1'' ; f2''] + x_rgb)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention_block, CrossAttentionConfig, CrossAttentionParams};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::BatchNorm;
use crate::params::{init_uniform, ParamStore};

/// Number of CMCA/UDCA passes.
pub const STAGES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhancementConfig {
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub bn_eps: f64,
    /// With CMCA off, `r = f`.
    pub cmca: bool,
    /// With UDCA off, `f' = r`.
    pub udca: bool,
}

impl EnhancementConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            dropout: 0.1,
            ln_eps: 1e-5,
            bn_eps: 1e-5,
            cmca: true,
            udca: true,
        }
    }

    fn attention(&self) -> CrossAttentionConfig {
        CrossAttentionConfig {
            dim: self.dim,
            heads: self.heads,
            dropout: self.dropout,
            ln_eps: self.ln_eps,
        }
    }
}

/// `1x1 -> BN -> ReLU -> 3x3 (pad 1) -> BN -> ReLU -> 1x1 -> BN` on a
/// `G x G` grid with `C = 2D` channels throughout.
///
/// The block may be called several times per forward pass with the same
/// weights. Each call site keeps its own batch-norm running statistics
/// (`{prefix}.bn{i}.call{k}`), since the inputs of different calls follow
/// different distributions.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub prefix: String,
    pub convs: [(String, String); 3],
    pub norms: [BatchNorm; 3],
    pub calls: usize,
}

impl ConvBlock {
    pub const KERNELS: [usize; 3] = [1, 3, 1];

    pub fn new(prefix: &str, bn_eps: f64, calls: usize) -> Self {
        let conv = |i: usize| (format!("{prefix}.conv{i}.w"), format!("{prefix}.conv{i}.b"));
        let bn = |i: usize| BatchNorm::new(&format!("{prefix}.bn{i}"), bn_eps);
        Self {
            prefix: prefix.to_string(),
            convs: [conv(0), conv(1), conv(2)],
            norms: [bn(0), bn(1), bn(2)],
            calls,
        }
    }

    /// Batch norm `i` as used by call site `call`.
    pub fn norm(&self, i: usize, call: usize) -> BatchNorm {
        self.norms[i].with_stats(&format!("{}.call{call}", self.norms[i].prefix))
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, channels: usize, rng: &mut R) {
        for ((w, b), k) in self.convs.iter().zip(Self::KERNELS) {
            let fan_in = k * k * channels;
            store.insert(w.clone(), init_uniform(&[k, k, channels, channels], fan_in, rng));
            store.insert(b.clone(), init_uniform(&[channels], fan_in, rng));
        }
        for (i, bn) in self.norms.iter().enumerate() {
            bn.init_affine(store, channels);
            for call in 0..self.calls {
                self.norm(i, call).init_stats(store, channels);
            }
        }
    }

    /// `x: [B, N, C]` with `N` a perfect square; returns `[B, N, C]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, call: usize) -> Result<NodeId> {
        if call >= self.calls {
            return Err(Error::InvalidArgument(format!("{} has {} call sites, not {}", self.prefix, self.calls, call + 1)));
        }
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("conv block expects [B, N, C], got {shape:?}")));
        }
        let side = grid_side(shape[1])?;
        let mut h = g.reshape(x, &[shape[0], side, side, shape[2]]);
        for (i, ((w, b), k)) in self.convs.iter().zip(Self::KERNELS).enumerate() {
            let w = g.param(w);
            let b = g.param(b);
            h = g.conv2d(h, w, b, 1, k / 2);
            h = self.norm(i, call).forward(g, h);
            if i < 2 {
                h = g.relu(h);
            }
        }
        Ok(g.reshape(h, &shape))
    }
}

/// Side of a square grid with `n` cells.
pub fn grid_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side == 0 || side * side != n {
        return Err(Error::Shape(format!("{n} positions do not form a square grid")));
    }
    Ok(side)
}

#[derive(Debug, Clone)]
pub struct Enhancement {
    pub config: EnhancementConfig,
    /// One cross-attention set per stage, shared by its CMCA and UDCA calls.
    pub stages: Vec<CrossAttentionParams>,
    pub cb_rgb: ConvBlock,
    pub cb_sem: ConvBlock,
}

impl Enhancement {
    pub fn new(config: EnhancementConfig) -> Result<Self> {
        let stages = (0..STAGES)
            .map(|s| CrossAttentionParams::new(&format!("enh.stage{s}.ca"), config.attention()))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            stages,
            cb_rgb: ConvBlock::new("enh.cb_rgb", config.bn_eps, STAGES),
            cb_sem: ConvBlock::new("enh.cb_sem", config.bn_eps, STAGES),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for st in &self.stages {
            st.init(store, rng);
        }
        self.cb_rgb.init(store, 2 * self.config.dim, rng);
        self.cb_sem.init(store, 2 * self.config.dim, rng);
    }

    /// `r1..r4` for one stage.
    pub fn cmca(&self, g: &mut Graph, f: [NodeId; 4], stage: usize) -> Result<[NodeId; 4]> {
        check_same_shape(g, &f)?;
        let p = &self.stages[stage];
        let pairs = [(0, 2), (1, 3), (2, 0), (3, 1)];
        let mut r = f;
        for (i, (s, t)) in pairs.into_iter().enumerate() {
            r[i] = cross_attention_block(g, f[s], f[t], p, &format!("enh.stage{stage}.cmca.r{}", i + 1))?;
        }
        Ok(r)
    }

    /// `f1'..f4'` for one stage; differences come from this stage's input `f`.
    pub fn udca(&self, g: &mut Graph, r: [NodeId; 4], f: [NodeId; 4], stage: usize) -> Result<[NodeId; 4]> {
        check_same_shape(g, &f)?;
        check_same_shape(g, &r)?;
        if g.shape(r[0]) != g.shape(f[0]) {
            return Err(Error::Shape("udca inputs and differences disagree in shape".into()));
        }
        let p = &self.stages[stage];
        let d_rgb = g.sub(f[1], f[0]);
        let d_sem = g.sub(f[3], f[2]);
        let mut out = r;
        for (i, d) in [d_rgb, d_rgb, d_sem, d_sem].into_iter().enumerate() {
            out[i] = cross_attention_block(g, r[i], d, p, &format!("enh.stage{stage}.udca.f{}", i + 1))?;
        }
        Ok(out)
    }

    /// One CMCA/UDCA stage with the ablation toggles applied.
    pub fn stage(&self, g: &mut Graph, f: [NodeId; 4], stage: usize) -> Result<[NodeId; 4]> {
        check_same_shape(g, &f)?;
        let r = if self.config.cmca { self.cmca(g, f, stage)? } else { f };
        if self.config.udca {
            self.udca(g, r, f, stage)
        } else {
            Ok(r)
        }
    }

    /// `(x_rgb, x_sem)`, each `[B, N, 2D]`.
    pub fn enhance(&self, g: &mut Graph, f: [NodeId; 4]) -> Result<(NodeId, NodeId)> {
        check_same_shape(g, &f)?;
        let d = g.shape(f[0]).last().copied().unwrap_or(0);
        if d != self.config.dim {
            return Err(Error::Shape(format!("expected {} channels, got {d}", self.config.dim)));
        }
        let mut outs = Vec::with_capacity(STAGES);
        let mut cur = f;
        for s in 0..STAGES {
            cur = self.stage(g, cur, s)?;
            outs.push(cur);
        }
        let fuse = |g: &mut Graph, cb: &ConvBlock, a: usize, b: usize| -> Result<NodeId> {
            let first = g.concat(&[outs[0][a], outs[0][b]]);
            let mut x = cb.forward(g, first, 0)?;
            for (call, o) in outs.iter().enumerate().skip(1) {
                let cat = g.concat(&[o[a], o[b]]);
                let sum = g.add(cat, x);
                x = cb.forward(g, sum, call)?;
            }
            Ok(x)
        };
        let x_rgb = fuse(g, &self.cb_rgb, 0, 1)?;
        let x_sem = fuse(g, &self.cb_sem, 2, 3)?;
        Ok((x_rgb, x_sem))
    }

    /// Scalars held by the cross-attention set of `stage`.
    pub fn stage_param_count(&self, store: &ParamStore, stage: usize) -> usize {
        store.num_scalars_with_prefix(&format!("{}.", self.stages[stage].prefix))
    }
}

fn check_same_shape(g: &Graph, f: &[NodeId; 4]) -> Result<()> {
    let s0 = g.shape(f[0]);
    if s0.len() != 3 {
        return Err(Error::Shape(format!("feature grids must be [B, N, D], got {s0:?}")));
    }
    for &x in &f[1..] {
        if g.shape(x) != s0 {
            return Err(Error::Shape(format!(
                "feature grids differ in shape: {s0:?} vs {:?}",
                g.shape(x)
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::tests::oracle_block;
    use crate::autograd::Mode;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;

    fn setup(seed: u64, cmca: bool, udca: bool) -> (ParamStore, Enhancement) {
        let mut cfg = EnhancementConfig::new(D, 2);
        cfg.dropout = 0.0;
        cfg.cmca = cmca;
        cfg.udca = udca;
        let e = Enhancement::new(cfg).unwrap();
        let mut store = ParamStore::default();
        e.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        // non-trivial BN so the eval path exercises every statistic
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let names: Vec<String> = store.buffers().keys().cloned().collect();
        for n in names {
            let len = store.buffer(&n).unwrap().len();
            let t = Tensor::uniform(&[len], 0.5, &mut rng);
            let t = if n.ends_with("running_var") { t.map(|v| v + 1.0) } else { t };
            store.insert_buffer(n, t);
        }
        (store, e)
    }

    fn grids(n: usize, seed: u64) -> [Tensor; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        std::array::from_fn(|_| Tensor::uniform(&[1, n, D], 1.0, &mut rng))
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn close(a: &[Vec<f64>], t: &Tensor, tol: f64) -> bool {
        a.iter().enumerate().all(|(r, row)| row.iter().zip(t.row(r)).all(|(x, y)| (x - y).abs() < tol))
    }

    fn sub(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect()
    }

    /// Conv block by explicit loops over a `side x side` grid (batch 1, eval BN).
    fn oracle_cb(store: &ParamStore, prefix: &str, call: usize, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = x.len();
        let side = (n as f64).sqrt() as usize;
        let c = x[0].len();
        let mut h = x.to_vec();
        for (i, k) in ConvBlock::KERNELS.into_iter().enumerate() {
            let w = store.get(&format!("{prefix}.conv{i}.w")).unwrap().data();
            let b = store.get(&format!("{prefix}.conv{i}.b")).unwrap().data();
            let pad = (k / 2) as isize;
            let mut out = vec![vec![0.0; c]; n];
            for y in 0..side {
                for xx in 0..side {
                    for co in 0..c {
                        let mut acc = b[co];
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= side as isize || sx >= side as isize {
                                    continue;
                                }
                                let src = &h[sy as usize * side + sx as usize];
                                for ci in 0..c {
                                    acc += src[ci] * w[((ky * k + kx) * c + ci) * c + co];
                                }
                            }
                        }
                        out[y * side + xx][co] = acc;
                    }
                }
            }
            let get = |s: &str| -> Vec<f64> {
                match store.get(&format!("{prefix}.bn{i}.{s}")) {
                    Some(t) => t.data().to_vec(),
                    None => store.buffer(&format!("{prefix}.bn{i}.call{call}.{s}")).unwrap().data().to_vec(),
                }
            };
            let (gm, bt, rm, rv) = (get("gamma"), get("beta"), get("running_mean"), get("running_var"));
            for row in &mut out {
                for co in 0..c {
                    let v = (row[co] - rm[co]) / (rv[co] + 1e-5).sqrt() * gm[co] + bt[co];
                    row[co] = if i < 2 { v.max(0.0) } else { v };
                }
            }
            h = out;
        }
        h
    }

    fn run_enhance(store: &ParamStore, e: &Enhancement, f: &[Tensor; 4]) -> (Tensor, Tensor) {
        let mut g = Graph::new(store, Mode::Eval);
        let ids = f.clone().map(|t| g.constant(t));
        let (a, b) = e.enhance(&mut g, ids).unwrap();
        (g.value(a).clone(), g.value(b).clone())
    }

    #[test]
    fn cmca_matches_pairwise_oracle() {
        let (store, e) = setup(1, true, true);
        let f = grids(4, 2);
        let mut g = Graph::new(&store, Mode::Eval);
        let ids = f.clone().map(|t| g.constant(t));
        let r = e.cmca(&mut g, ids, 0).unwrap();
        for (i, (s, t)) in [(0, 2), (1, 3), (2, 0), (3, 1)].into_iter().enumerate() {
            let want = oracle_block(&store, "enh.stage0.ca", 2, &rows(&f[s]), &rows(&f[t]));
            assert!(close(&want, g.value(r[i]), 1e-9), "r{}", i + 1);
        }
    }

    #[test]
    fn udca_uses_difference_targets() {
        let (store, e) = setup(3, true, true);
        let f = grids(4, 4);
        let r = grids(4, 5);
        let mut g = Graph::new(&store, Mode::Eval);
        let fi = f.clone().map(|t| g.constant(t));
        let ri = r.clone().map(|t| g.constant(t));
        let out = e.udca(&mut g, ri, fi, 1).unwrap();
        let d_rgb = sub(&rows(&f[1]), &rows(&f[0]));
        let d_sem = sub(&rows(&f[3]), &rows(&f[2]));
        for (i, d) in [&d_rgb, &d_rgb, &d_sem, &d_sem].into_iter().enumerate() {
            let want = oracle_block(&store, "enh.stage1.ca", 2, &rows(&r[i]), d);
            assert!(close(&want, g.value(out[i]), 1e-9));
        }
    }

    fn zero(store: &mut ParamStore, prefix: &str) {
        let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.insert(n, Tensor::zeros(&shape));
        }
    }

    fn ln(x: &Tensor) -> Tensor {
        let d = x.last_dim();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            row.iter_mut().for_each(|a| *a = (*a - m) / (v + 1e-5).sqrt());
        }
        out
    }

    #[test]
    fn zero_branches_collapse_to_double_layer_norm() {
        let (mut store, e) = setup(5, true, true);
        zero(&mut store, "enh.stage0.ca.mha");
        zero(&mut store, "enh.stage0.ca.ffn");
        let f = grids(4, 6);
        let same = [f[0].clone(), f[1].clone(), f[0].clone(), f[1].clone()];
        let mut g = Graph::new(&store, Mode::Eval);
        let ids = same.clone().map(|t| g.constant(t));
        let r = e.cmca(&mut g, ids, 0).unwrap();
        assert!(g.value(r[0]).max_abs_diff(&ln(&ln(&same[0]))) < 1e-12);
    }

    #[test]
    fn zero_difference_collapses_udca() {
        let (mut store, e) = setup(6, true, true);
        zero(&mut store, "enh.stage0.ca.ffn");
        let f = grids(4, 7);
        let fixed = [f[0].clone(), f[0].clone(), f[2].clone(), f[2].clone()];
        let r = grids(4, 8);
        let mut g = Graph::new(&store, Mode::Eval);
        let fi = fixed.map(|t| g.constant(t));
        let ri = r.clone().map(|t| g.constant(t));
        let out = e.udca(&mut g, ri, fi, 0).unwrap();
        for i in 0..4 {
            assert!(g.value(out[i]).max_abs_diff(&ln(&ln(&r[i]))) < 1e-12);
        }
    }

    #[test]
    fn conv_block_zero_input_and_identity_chain() {
        let (mut store, e) = setup(7, true, true);
        let c = 2 * D;
        for i in 0..3 {
            store.insert(format!("enh.cb_rgb.conv{i}.b"), Tensor::zeros(&[c]));
            store.insert_buffer(format!("enh.cb_rgb.bn{i}.call0.running_mean"), Tensor::zeros(&[c]));
            store.insert_buffer(format!("enh.cb_rgb.bn{i}.call0.running_var"), Tensor::ones(&[c]));
        }
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::zeros(&[1, 9, c]));
        let y = e.cb_rgb.forward(&mut g, x, 0).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        // identity kernels: output is BN3(relu(BN2(relu(BN1(x)))))
        for (i, k) in ConvBlock::KERNELS.into_iter().enumerate() {
            let mut w = Tensor::zeros(&[k, k, c, c]);
            let centre = (k / 2) * k + k / 2;
            for ch in 0..c {
                w.data_mut()[(centre * c + ch) * c + ch] = 1.0;
            }
            store.insert(format!("enh.cb_rgb.conv{i}.w"), w);
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            store.insert(format!("enh.cb_rgb.bn{i}.gamma"), Tensor::uniform(&[c], 1.0, &mut rng));
            store.insert(format!("enh.cb_rgb.bn{i}.beta"), Tensor::uniform(&[c], 1.0, &mut rng));
        }
        let input = Tensor::uniform(&[1, 9, c], 1.0, &mut ChaCha8Rng::seed_from_u64(40));
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(input.clone());
        let y = e.cb_rgb.forward(&mut g, x, 0).unwrap();
        let bn = |i: usize, v: f64, ch: usize| {
            let gm = store.get(&format!("enh.cb_rgb.bn{i}.gamma")).unwrap().data()[ch];
            let bt = store.get(&format!("enh.cb_rgb.bn{i}.beta")).unwrap().data()[ch];
            v / (1.0f64 + 1e-5).sqrt() * gm + bt
        };
        for (idx, (got, x)) in g.value(y).data().iter().zip(input.data()).enumerate() {
            let ch = idx % c;
            let want = bn(2, bn(1, bn(0, *x, ch).max(0.0), ch).max(0.0), ch);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_block_rejects_non_square_and_preserves_full_scale_shape() {
        let (store, e) = setup(8, true, true);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::zeros(&[1, 5, 2 * D]));
        assert!(matches!(e.cb_rgb.forward(&mut g, x, 0), Err(Error::Shape(_))));
        assert_eq!(grid_side(64).unwrap(), 8);

        let big = ConvBlock::new("cb", 1e-5, 1);
        let mut s = ParamStore::default();
        big.init(&mut s, 1024, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.constant(Tensor::zeros(&[1, 64, 1024]));
        let y = big.forward(&mut g, x, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 64, 1024]);
    }

    #[test]
    fn enhance_matches_straight_line_oracle() {
        let (store, e) = setup(9, true, true);
        let f = grids(4, 10);
        let (x_rgb, x_sem) = run_enhance(&store, &e, &f);
        assert_eq!(x_rgb.shape(), &[1, 4, 2 * D]);

        let block = |s: usize, a: &[Vec<f64>], b: &[Vec<f64>]| oracle_block(&store, &format!("enh.stage{s}.ca"), 2, a, b);
        let mut cur: Vec<Vec<Vec<f64>>> = f.iter().map(rows).collect();
        let mut stages = Vec::new();
        for s in 0..STAGES {
            let r = [block(s, &cur[0], &cur[2]), block(s, &cur[1], &cur[3]), block(s, &cur[2], &cur[0]), block(s, &cur[3], &cur[1])];
            let d_rgb = sub(&cur[1], &cur[0]);
            let d_sem = sub(&cur[3], &cur[2]);
            cur = vec![block(s, &r[0], &d_rgb), block(s, &r[1], &d_rgb), block(s, &r[2], &d_sem), block(s, &r[3], &d_sem)];
            stages.push(cur.clone());
        }
        let cat = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
        };
        let add = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
        };
        let want_rgb = {
            let x = oracle_cb(&store, "enh.cb_rgb", 0, &cat(&stages[0][0], &stages[0][1]));
            oracle_cb(&store, "enh.cb_rgb", 1, &add(&cat(&stages[1][0], &stages[1][1]), &x))
        };
        let want_sem = {
            let x = oracle_cb(&store, "enh.cb_sem", 0, &cat(&stages[0][2], &stages[0][3]));
            oracle_cb(&store, "enh.cb_sem", 1, &add(&cat(&stages[1][2], &stages[1][3]), &x))
        };
        assert!(close(&want_rgb, &x_rgb, 1e-8));
        assert!(close(&want_sem, &x_sem, 1e-8));
    }

    #[test]
    fn symmetric_inputs_give_equal_streams() {
        let (mut store, e) = setup(11, true, true);
        store.copy_prefix("enh.cb_rgb.", "enh.cb_sem.");
        let f = grids(4, 12);
        let a = [f[0].clone(), f[0].clone(), f[0].clone(), f[0].clone()];
        let (x_rgb, x_sem) = run_enhance(&store, &e, &a);
        assert_eq!(x_rgb, x_sem);
    }

    #[test]
    fn one_attention_set_per_stage_is_shared() {
        let (mut store, e) = setup(13, true, true);
        for s in 0..STAGES {
            assert_eq!(e.stage_param_count(&store, s), CrossAttentionParams::param_count(D));
        }
        let attention_total: usize = store
            .params()
            .iter()
            .filter(|(n, _)| n.contains(".ca."))
            .map(|(_, t)| t.len())
            .sum();
        assert_eq!(attention_total, STAGES * CrossAttentionParams::param_count(D));

        let f = grids(4, 14);
        let r = grids(4, 15);
        let outputs = |store: &ParamStore| {
            let mut g = Graph::new(store, Mode::Eval);
            let fi = f.clone().map(|t| g.constant(t));
            let ri = r.clone().map(|t| g.constant(t));
            let c = e.cmca(&mut g, fi, 0).unwrap();
            let u = e.udca(&mut g, ri, fi, 0).unwrap();
            (g.value(c[0]).clone(), g.value(u[0]).clone())
        };
        let (c0, u0) = outputs(&store);
        store.get_mut("enh.stage0.ca.mha.w_v").unwrap().data_mut()[0] += 0.5;
        let (c1, u1) = outputs(&store);
        assert!(c0.max_abs_diff(&c1) > 1e-6);
        assert!(u0.max_abs_diff(&u1) > 1e-6);
    }

    #[test]
    fn ablations_keep_shapes() {
        for (cmca, udca) in [(true, true), (true, false), (false, true), (false, false)] {
            let (store, e) = setup(16, cmca, udca);
            let (a, b) = run_enhance(&store, &e, &grids(9, 17));
            assert_eq!(a.shape(), &[1, 9, 2 * D]);
            assert_eq!(b.shape(), &[1, 9, 2 * D]);
            assert!(a.all_finite() && b.all_finite());
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (store, e) = setup(18, true, true);
        let mut g = Graph::new(&store, Mode::Eval);
        g.enable_recording();
        let ids = grids(4, 19).map(|t| g.constant(t));
        e.enhance(&mut g, ids).unwrap();
        let recs = g.take_records();
        assert_eq!(recs.len(), STAGES * 8);
        for r in recs {
            let n = r.head_mean.last_dim();
            for row in r.head_mean.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (store, e) = setup(20, true, true);
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.constant(Tensor::zeros(&[1, 4, D]));
        let b = g.constant(Tensor::zeros(&[1, 9, D]));
        assert!(e.enhance(&mut g, [a, a, a, b]).is_err());
    }

    #[test]
    fn gradients_through_enhance() {
        let (store, e) = setup(21, true, true);
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(6),
            ..Default::default()
        };
        let probe = Tensor::uniform(&[1, 4, 2 * D], 1.0, &mut ChaCha8Rng::seed_from_u64(22));
        let report = check_gradients(&store, &grids(4, 23), &opts, |g, ids| {
            let (a, b) = e.enhance(g, [ids[0], ids[1], ids[2], ids[3]])?;
            let s = g.add(a, b);
            Ok(g.weighted_sum(s, probe.clone()))
        })
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn each_conv_block_call_keeps_its_own_statistics() {
        let (store, e) = setup(31, true, true);
        let f = grids(9, 32);
        let mut g = Graph::new(&store, Mode::Train);
        let ids = f.map(|t| g.constant(t));
        e.enhance(&mut g, ids).unwrap();
        let prefixes: Vec<String> = g.take_bn_updates().into_iter().map(|u| u.prefix).collect();
        assert_eq!(prefixes.len(), 2 * STAGES * 3);
        for call in 0..STAGES {
            assert!(prefixes.contains(&format!("enh.cb_rgb.bn1.call{call}")));
            assert!(store.buffer(&format!("enh.cb_sem.bn2.call{call}.running_var")).is_some());
        }
        assert!(store.buffer("enh.cb_rgb.bn0.running_mean").is_none());
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::zeros(&[1, 9, 2 * D]));
        assert!(e.cb_rgb.forward(&mut g, x, STAGES).is_err());
    }
}
