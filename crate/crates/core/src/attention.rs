//! The cross-attention module used by both enhancement roles.
//!
//! `block(source, target)` is
//!
//! ```text
//! out1 = LN(source + Dropout(MHA(source, target, target)))
//! out  = LN(out1 + Dropout(FFN(out1)))        FFN(z) = max(0, z W1) W2
//! ```
//!
//! with post-norm ordering. Queries come from `source`, keys and values from
//! `target`, so the output always has the shape of `source`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl CrossAttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            dropout: 0.1,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Names of one cross-attention module's weights: per-head query/key/value
/// projections, the output projection, the two-layer FFN and two layer norms.
#[derive(Debug, Clone)]
pub struct CrossAttentionParams {
    pub prefix: String,
    pub config: CrossAttentionConfig,
    pub mha: MultiHeadAttention,
    pub ffn: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl CrossAttentionParams {
    pub fn new(prefix: &str, config: CrossAttentionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            prefix: prefix.to_string(),
            config,
            mha: MultiHeadAttention::new(&format!("{prefix}.mha"), config.heads),
            ffn: FeedForward::new(&format!("{prefix}.ffn")),
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), config.ln_eps),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), config.ln_eps),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.config.dim;
        self.mha.init(store, d, rng);
        self.ffn.init(store, d, rng);
        self.ln1.init(store, d);
        self.ln2.init(store, d);
    }

    /// Scalar count of one parameter set: `12 D^2 + 4 D`.
    pub fn param_count(dim: usize) -> usize {
        MultiHeadAttention::param_count(dim) + FeedForward::param_count(dim) + 2 * LayerNorm::param_count(dim)
    }
}

/// Concatenated per-head attention of `source` over `target`, projected by `W_O`.
pub fn multi_head_cross_attention(
    g: &mut Graph,
    source: NodeId,
    target: NodeId,
    params: &CrossAttentionParams,
    label: &str,
) -> Result<NodeId> {
    params.mha.forward(g, source, target, false, label)
}

/// Full module: attention, dropout, residual, LN, FFN, dropout, residual, LN.
pub fn cross_attention_block(
    g: &mut Graph,
    source: NodeId,
    target: NodeId,
    params: &CrossAttentionParams,
    label: &str,
) -> Result<NodeId> {
    let p = params.config.dropout;
    let z = multi_head_cross_attention(g, source, target, params, label)?;
    let z = g.dropout(z, p);
    let x = g.add(source, z);
    let out1 = params.ln1.forward(g, x);
    let f = params.ffn.forward(g, out1);
    let f = g.dropout(f, p);
    let x = g.add(out1, f);
    Ok(params.ln2.forward(g, x))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autograd::Mode;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, heads: usize, seed: u64) -> (ParamStore, CrossAttentionParams) {
        let mut cfg = CrossAttentionConfig::new(dim, heads);
        cfg.dropout = 0.0;
        let p = CrossAttentionParams::new("ca", cfg).unwrap();
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.init(&mut store, &mut rng);
        // non-trivial norm parameters so the oracle exercises them
        for name in ["ca.ln1.gamma", "ca.ln1.beta", "ca.ln2.gamma", "ca.ln2.beta"] {
            let d = store.get(name).unwrap().len();
            store.insert(name, Tensor::uniform(&[d], 1.0, &mut rng).map(|v| v + 1.0));
        }
        (store, p)
    }

    fn rand_grid(b: usize, n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[b, n, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    // ---- loop oracle: explicit index arithmetic, no tape, no matmul helpers ----

    fn mat(store: &ParamStore, name: &str) -> (Vec<f64>, usize) {
        let t = store.get(name).unwrap();
        (t.data().to_vec(), t.shape()[1])
    }

    fn oracle_mha(store: &ParamStore, prefix: &str, heads: usize, src: &[Vec<f64>], tgt: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = src[0].len();
        let dk = d / heads;
        let (wq, _) = mat(store, &format!("{prefix}.w_q"));
        let (wk, _) = mat(store, &format!("{prefix}.w_k"));
        let (wv, _) = mat(store, &format!("{prefix}.w_v"));
        let (wo, _) = mat(store, &format!("{prefix}.w_o"));
        let proj = |x: &[f64], w: &[f64], col: usize| (0..d).map(|r| x[r] * w[r * d + col]).sum::<f64>();
        let mut concat = vec![vec![0.0; d]; src.len()];
        for h in 0..heads {
            for (i, s) in src.iter().enumerate() {
                let q: Vec<f64> = (0..dk).map(|c| proj(s, &wq, h * dk + c)).collect();
                let scores: Vec<f64> = tgt
                    .iter()
                    .map(|t| {
                        let k: Vec<f64> = (0..dk).map(|c| proj(t, &wk, h * dk + c)).collect();
                        q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dk {
                    concat[i][h * dk + c] = tgt
                        .iter()
                        .zip(&e)
                        .map(|(t, w)| w / z * proj(t, &wv, h * dk + c))
                        .sum();
                }
            }
        }
        concat
            .iter()
            .map(|row| (0..d).map(|c| (0..d).map(|r| row[r] * wo[r * d + c]).sum()).collect())
            .collect()
    }

    fn oracle_ln(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[i] + beta[i])
            .collect()
    }

    pub(crate) fn oracle_block(store: &ParamStore, prefix: &str, heads: usize, src: &[Vec<f64>], tgt: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = src[0].len();
        let z = oracle_mha(store, &format!("{prefix}.mha"), heads, src, tgt);
        let g = |n: &str| store.get(&format!("{prefix}.{n}")).unwrap().data().to_vec();
        let (w1, _) = mat(store, &format!("{prefix}.ffn.w1"));
        let (w2, _) = mat(store, &format!("{prefix}.ffn.w2"));
        src.iter()
            .zip(&z)
            .map(|(s, zr)| {
                let x: Vec<f64> = s.iter().zip(zr).map(|(a, b)| a + b).collect();
                let o1 = oracle_ln(&x, &g("ln1.gamma"), &g("ln1.beta"));
                let hidden: Vec<f64> = (0..4 * d)
                    .map(|c| (0..d).map(|r| o1[r] * w1[r * 4 * d + c]).sum::<f64>().max(0.0))
                    .collect();
                let f: Vec<f64> = (0..d).map(|c| (0..4 * d).map(|r| hidden[r] * w2[r * d + c]).sum()).collect();
                let x2: Vec<f64> = o1.iter().zip(&f).map(|(a, b)| a + b).collect();
                oracle_ln(&x2, &g("ln2.gamma"), &g("ln2.beta"))
            })
            .collect()
    }

    fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn run(store: &ParamStore, p: &CrossAttentionParams, src: &Tensor, tgt: &Tensor, full: bool) -> Tensor {
        let mut g = Graph::new(store, Mode::Eval);
        let s = g.constant(src.clone());
        let t = g.constant(tgt.clone());
        let out = if full {
            cross_attention_block(&mut g, s, t, p, "t").unwrap()
        } else {
            multi_head_cross_attention(&mut g, s, t, p, "t").unwrap()
        };
        g.value(out).clone()
    }

    #[test]
    fn mha_matches_loop_oracle() {
        let (store, p) = setup(4, 2, 3);
        let src = rand_grid(1, 2, 4, 10);
        let tgt = rand_grid(1, 2, 4, 11);
        let got = run(&store, &p, &src, &tgt, false);
        let want = oracle_mha(&store, "ca.mha", 2, &rows_of(&src), &rows_of(&tgt));
        for (r, w) in want.iter().enumerate() {
            for (c, v) in w.iter().enumerate() {
                assert!((got.row(r)[c] - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn block_matches_loop_oracle() {
        let (store, p) = setup(8, 2, 4);
        let src = rand_grid(1, 4, 8, 12);
        let tgt = rand_grid(1, 3, 8, 13);
        let got = run(&store, &p, &src, &tgt, true);
        let want = oracle_block(&store, "ca", 2, &rows_of(&src), &rows_of(&tgt));
        for (r, w) in want.iter().enumerate() {
            for (c, v) in w.iter().enumerate() {
                assert!((got.row(r)[c] - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let (mut store, p) = setup(4, 2, 5);
        store.insert("ca.mha.w_q", Tensor::zeros(&[4, 4]));
        // identity output projection so Z is visible directly
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        store.insert("ca.mha.w_o", eye.clone());
        store.insert("ca.mha.w_v", eye);
        let src = rand_grid(1, 3, 4, 20);
        let tgt = rand_grid(1, 5, 4, 21);
        let got = run(&store, &p, &src, &tgt, false);
        for c in 0..4 {
            let mean = (0..5).map(|r| tgt.row(r)[c]).sum::<f64>() / 5.0;
            for r in 0..3 {
                assert!((got.row(r)[c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_target_row_gets_full_weight() {
        let (store, p) = setup(4, 2, 6);
        let src = rand_grid(1, 3, 4, 22);
        let tgt = rand_grid(1, 1, 4, 23);
        let mut g = Graph::new(&store, Mode::Eval);
        g.enable_recording();
        let s = g.constant(src);
        let t = g.constant(tgt.clone());
        let out = multi_head_cross_attention(&mut g, s, t, &p, "single").unwrap();
        let out = g.value(out).clone();
        let rec = g.take_records();
        assert!(rec[0].head_mean.data().iter().all(|&w| w == 1.0));
        // Z = V row projected by W_O, identical for every query
        for r in 1..3 {
            assert!(out.row(r).iter().zip(out.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn zeroed_branches_collapse_to_double_layer_norm() {
        let (mut store, p) = setup(8, 2, 7);
        for name in ["ca.mha.w_q", "ca.mha.w_k", "ca.mha.w_v", "ca.mha.w_o", "ca.ffn.w1", "ca.ffn.w2"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.insert(name, Tensor::zeros(&shape));
        }
        for name in ["ca.ln1", "ca.ln2"] {
            store.insert(format!("{name}.gamma"), Tensor::ones(&[8]));
            store.insert(format!("{name}.beta"), Tensor::zeros(&[8]));
        }
        let src = rand_grid(1, 4, 8, 30);
        let tgt = rand_grid(1, 4, 8, 31);
        let got = run(&store, &p, &src, &tgt, true);
        let ones = vec![1.0; 8];
        let zeros = vec![0.0; 8];
        for r in 0..4 {
            let want = oracle_ln(&oracle_ln(src.row(r), &ones, &zeros), &ones, &zeros);
            for c in 0..8 {
                assert!((got.row(r)[c] - want[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn eval_mode_is_bitwise_deterministic() {
        let (store, p) = setup(8, 2, 8);
        let src = rand_grid(2, 4, 8, 40);
        let tgt = rand_grid(2, 4, 8, 41);
        assert_eq!(run(&store, &p, &src, &tgt, true), run(&store, &p, &src, &tgt, true));
    }

    #[test]
    fn rejects_mismatch_and_nan() {
        let (store, p) = setup(4, 2, 9);
        let mut g = Graph::new(&store, Mode::Eval);
        let s = g.constant(rand_grid(1, 2, 4, 1));
        let t = g.constant(rand_grid(1, 2, 8, 2));
        assert!(matches!(cross_attention_block(&mut g, s, t, &p, "x"), Err(Error::Shape(_))));
        let mut bad = rand_grid(1, 2, 4, 3);
        bad.data_mut()[0] = f64::NAN;
        let t = g.constant(bad);
        assert!(matches!(cross_attention_block(&mut g, s, t, &p, "x"), Err(Error::NonFinite(_))));
        assert!(CrossAttentionParams::new("x", CrossAttentionConfig::new(6, 4)).is_err());
    }

    #[test]
    fn param_count_formula() {
        let (store, _) = setup(8, 2, 1);
        assert_eq!(store.num_scalars(), CrossAttentionParams::param_count(8));
        assert_eq!(CrossAttentionParams::param_count(8), 12 * 64 + 32);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (store, p) = setup(8, 2, 11);
        let inputs = vec![rand_grid(1, 4, 8, 50), rand_grid(1, 4, 8, 51)];
        let probe = rand_grid(1, 4, 8, 52);
        let report = check_gradients(&store, &inputs, &GradCheckOptions::default(), |g, ids| {
            let out = cross_attention_block(g, ids[0], ids[1], &p, "gc")?;
            Ok(g.weighted_sum(out, probe.clone()))
        })
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn attention_rows_are_stochastic(seed in 0u64..10_000, n_src in 1usize..6, n_tgt in 1usize..6) {
            let (store, p) = setup(8, 2, seed);
            let mut g = Graph::new(&store, Mode::Eval);
            g.enable_recording();
            let s = g.constant(rand_grid(2, n_src, 8, seed + 1).map(|v| v * 5.0));
            let t = g.constant(rand_grid(2, n_tgt, 8, seed + 2).map(|v| v * 5.0));
            cross_attention_block(&mut g, s, t, &p, "p").unwrap();
            for rec in g.take_records() {
                for map in [&rec.head_mean, &rec.head_max] {
                    prop_assert!(map.data().iter().all(|&w| (0.0..=1.0).contains(&w)));
                }
                for r in 0..rec.head_mean.rows() {
                    prop_assert!((rec.head_mean.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn output_invariant_under_target_permutation(seed in 0u64..10_000, rot in 1usize..4) {
            let (store, p) = setup(8, 2, seed);
            let src = rand_grid(1, 3, 8, seed + 7);
            let tgt = rand_grid(1, 4, 8, seed + 8);
            let mut rows = rows_of(&tgt);
            rows.rotate_left(rot);
            let permuted = Tensor::new(vec![1, 4, 8], rows.concat());
            let a = run(&store, &p, &src, &tgt, true);
            let b = run(&store, &p, &src, &permuted, true);
            prop_assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }
}
