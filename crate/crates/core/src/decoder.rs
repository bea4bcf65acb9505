//! Gated multimodal caption decoder and caption generation.
//!
//! One decoder layer computes
//!
//! ```text
//! x_word  = LN(MaskedMHA(x_in) + x_in)
//! x'_rgb  = MHA(x_word, x_rgb)            x'_sem = MHA(x_word, x_sem)
//! g_word  = sigmoid(x_word W_word + b)
//! g_rgb   = sigmoid([x'_rgb ; x_word] W_rgb + b)      (likewise g_sem)
//! x_fused = g_word * x_word + g_rgb * x'_rgb + g_sem * x'_sem
//! x_final = LN2(LN1(x_fused) + FFN(LN1(x_fused)))
//! ```
//!
//! and the last layer's `x_final` is projected to vocabulary logits. The
//! model width is `2D`, matching the enhanced grids.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_at, Graph, Mode, NodeId};
use crate::dataset::{END, START};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{init_uniform, ParamStore};
use crate::tensor::Tensor;

/// Which enhanced streams the decoder attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Dual,
    RgbOnly,
    SemOnly,
}

impl Fusion {
    /// `None` when neither stream is enabled.
    pub fn from_flags(use_xrgb: bool, use_xsem: bool) -> Option<Self> {
        match (use_xrgb, use_xsem) {
            (true, true) => Some(Fusion::Dual),
            (true, false) => Some(Fusion::RgbOnly),
            (false, true) => Some(Fusion::SemOnly),
            (false, false) => None,
        }
    }

    pub fn uses_rgb(self) -> bool {
        self != Fusion::SemOnly
    }

    pub fn uses_sem(self) -> bool {
        self != Fusion::RgbOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Model width, `2D`.
    pub width: usize,
    pub heads: usize,
    /// Output classes, specials included.
    pub vocab_size: usize,
    /// Longest input sequence (start token plus generated tokens).
    pub t_max: usize,
    pub layers: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub fusion: Fusion,
}

impl DecoderConfig {
    pub fn new(width: usize, heads: usize, vocab_size: usize) -> Self {
        Self {
            width,
            heads,
            vocab_size,
            t_max: 30,
            layers: 1,
            dropout: 0.1,
            ln_eps: 1e-5,
            fusion: Fusion::Dual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.vocab_size == 0 || self.t_max == 0 || self.layers == 0 {
            return Err(Error::Config("decoder needs a vocabulary, t_max >= 1 and one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub prefix: String,
    pub self_attn: MultiHeadAttention,
    pub ln_word: LayerNorm,
    pub cross_rgb: MultiHeadAttention,
    pub cross_sem: MultiHeadAttention,
    pub gate_word: Linear,
    pub gate_rgb: Linear,
    pub gate_sem: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    fn new(prefix: &str, c: &DecoderConfig) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        Self {
            prefix: prefix.to_string(),
            self_attn: MultiHeadAttention::new(&p("self"), c.heads),
            ln_word: LayerNorm::new(&p("ln_word"), c.ln_eps),
            cross_rgb: MultiHeadAttention::new(&p("cross_rgb"), c.heads),
            cross_sem: MultiHeadAttention::new(&p("cross_sem"), c.heads),
            gate_word: Linear::new(&p("gate_word")),
            gate_rgb: Linear::new(&p("gate_rgb")),
            gate_sem: Linear::new(&p("gate_sem")),
            ln1: LayerNorm::new(&p("ln1"), c.ln_eps),
            ln2: LayerNorm::new(&p("ln2"), c.ln_eps),
            ffn: FeedForward::new(&p("ffn")),
        }
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, c: &DecoderConfig, rng: &mut R) {
        let w = c.width;
        self.self_attn.init(store, w, rng);
        self.ln_word.init(store, w);
        self.gate_word.init(store, w, w, rng);
        if c.fusion.uses_rgb() {
            self.cross_rgb.init(store, w, rng);
            self.gate_rgb.init(store, 2 * w, w, rng);
        }
        if c.fusion.uses_sem() {
            self.cross_sem.init(store, w, rng);
            self.gate_sem.init(store, 2 * w, w, rng);
        }
        self.ln1.init(store, w);
        self.ln2.init(store, w);
        self.ffn.init(store, w, rng);
    }
}

/// Gate activations of one fusion call, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    pub fused: NodeId,
    pub g_word: NodeId,
    pub g_rgb: Option<NodeId>,
    pub g_sem: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embed: String,
    pub pos: String,
    pub layers: Vec<DecoderLayer>,
    pub out: Linear,
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            embed: "dec.embed".into(),
            pos: "dec.pos".into(),
            layers: (0..config.layers)
                .map(|l| DecoderLayer::new(&format!("dec.layer{l}"), &config))
                .collect(),
            out: Linear::new("dec.out"),
        })
    }

    /// Embeddings are `U(-1, 1)`; the learned position table starts from the
    /// sinusoidal one; the output bias starts at zero.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.config;
        store.insert(self.embed.clone(), init_uniform(&[c.vocab_size, c.width], 1, rng));
        store.insert(self.pos.clone(), sinusoidal_table(c.t_max, c.width));
        for l in &self.layers {
            l.init(store, c, rng);
        }
        self.out.init(store, c.width, c.vocab_size, rng);
    }

    /// Token embeddings plus positions: `tokens` is `B` rows of equal length.
    pub fn embed(&self, g: &mut Graph, tokens: &[Vec<usize>]) -> Result<NodeId> {
        let b = tokens.len();
        let t = tokens.first().map_or(0, Vec::len);
        if b == 0 || t == 0 {
            return Err(Error::InvalidArgument("decoder input is empty".into()));
        }
        if t > self.config.t_max {
            return Err(Error::InvalidArgument(format!(
                "sequence length {t} exceeds t_max {}",
                self.config.t_max
            )));
        }
        if tokens.iter().any(|row| row.len() != t) {
            return Err(Error::Shape("decoder rows must share one length".into()));
        }
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        let table = g.param(&self.embed);
        let x = g.gather(table, &ids, &[b, t, self.config.width]);
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = g.param(&self.pos);
        let p = g.gather(pos, &pos_ids, &[b, t, self.config.width]);
        Ok(g.add(x, p))
    }

    /// `LN(MaskedMHA(x) + x)`.
    pub fn masked_self_attention(&self, g: &mut Graph, layer: usize, x_input: NodeId) -> Result<NodeId> {
        let l = &self.layers[layer];
        let t = g.shape(x_input).get(1).copied().unwrap_or(0);
        if t > self.config.t_max {
            return Err(Error::InvalidArgument(format!("sequence length {t} exceeds t_max")));
        }
        let m = l.self_attn.forward(g, x_input, x_input, true, &format!("{}.self", l.prefix))?;
        let m = g.dropout(m, self.config.dropout);
        let s = g.add(m, x_input);
        Ok(l.ln_word.forward(g, s))
    }

    /// Cross-attends to the available streams and gates the three terms.
    pub fn mgca_fuse(
        &self,
        g: &mut Graph,
        layer: usize,
        x_word: NodeId,
        x_rgb: Option<NodeId>,
        x_sem: Option<NodeId>,
    ) -> Result<Fused> {
        let l = &self.layers[layer];
        let fusion = self.config.fusion;
        let need = |used: bool, x: Option<NodeId>, name: &str| -> Result<Option<NodeId>> {
            match (used, x) {
                (true, None) => Err(Error::InvalidArgument(format!("decoder needs the {name} stream"))),
                (true, Some(x)) => Ok(Some(x)),
                (false, _) => Ok(None),
            }
        };
        let x_rgb = need(fusion.uses_rgb(), x_rgb, "rgb")?;
        let x_sem = need(fusion.uses_sem(), x_sem, "semantic")?;
        for x in [x_rgb, x_sem].into_iter().flatten() {
            let (ws, xs) = (g.shape(x_word), g.shape(x));
            if xs.len() != 3 || xs[0] != ws[0] || xs[2] != ws[2] {
                return Err(Error::Shape(format!("stream {xs:?} does not match words {ws:?}")));
            }
        }
        let gw = l.gate_word.forward(g, x_word);
        let g_word = g.sigmoid(gw);
        let mut fused = g.mul(g_word, x_word);
        let mut gates = [None, None];
        for (i, (x, mha, gate, name)) in [
            (x_rgb, &l.cross_rgb, &l.gate_rgb, "cross_rgb"),
            (x_sem, &l.cross_sem, &l.gate_sem, "cross_sem"),
        ]
        .into_iter()
        .enumerate()
        {
            let Some(x) = x else { continue };
            let att = mha.forward(g, x_word, x, false, &format!("{}.{name}", l.prefix))?;
            let cat = g.concat(&[att, x_word]);
            let pre = gate.forward(g, cat);
            let gv = g.sigmoid(pre);
            let term = g.mul(gv, att);
            fused = g.add(fused, term);
            gates[i] = Some(gv);
        }
        Ok(Fused {
            fused,
            g_word,
            g_rgb: gates[0],
            g_sem: gates[1],
        })
    }

    /// `LN2(LN1(x) + FFN(LN1(x)))`.
    pub fn layer_output(&self, g: &mut Graph, layer: usize, x_fused: NodeId) -> Result<NodeId> {
        if !g.value(x_fused).all_finite() {
            return Err(Error::NonFinite("fused decoder features".into()));
        }
        let l = &self.layers[layer];
        let n = l.ln1.forward(g, x_fused);
        let f = l.ffn.forward(g, n);
        let f = g.dropout(f, self.config.dropout);
        let s = g.add(n, f);
        Ok(l.ln2.forward(g, s))
    }

    /// Vocabulary logits `x_final W_out + b_out`.
    pub fn decode_step(&self, g: &mut Graph, x_final: NodeId) -> NodeId {
        self.out.forward(g, x_final)
    }

    /// Teacher-forced logits `[B, T, V]` for `tokens` (`B` rows of length `T`).
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[Vec<usize>],
        x_rgb: Option<NodeId>,
        x_sem: Option<NodeId>,
    ) -> Result<NodeId> {
        let mut x = self.embed(g, tokens)?;
        for layer in 0..self.layers.len() {
            let w = self.masked_self_attention(g, layer, x)?;
            let f = self.mgca_fuse(g, layer, w, x_rgb, x_sem)?;
            x = self.layer_output(g, layer, f.fused)?;
        }
        Ok(self.decode_step(g, x))
    }

    /// Log-probabilities of the next token after each prefix, for one image
    /// pair. `x_rgb`/`x_sem` are `[1, N, 2D]`.
    pub fn next_log_probs(
        &self,
        store: &ParamStore,
        x_rgb: Option<&Tensor>,
        x_sem: Option<&Tensor>,
        prefixes: &[Vec<usize>],
    ) -> Result<Vec<Vec<f64>>> {
        let b = prefixes.len();
        let mut g = Graph::new(store, Mode::Eval);
        let mut repeat = |x: Option<&Tensor>| -> Option<NodeId> {
            x.map(|t| {
                let rows: Vec<Tensor> = (0..b).map(|_| t.batch_item(0)).collect();
                g.constant(Tensor::stack(&rows))
            })
        };
        let r = repeat(x_rgb);
        let s = repeat(x_sem);
        let logits = self.forward(&mut g, prefixes, r, s)?;
        let lv = g.value(logits);
        let (t, v) = (lv.shape()[1], lv.shape()[2]);
        Ok((0..b)
            .map(|i| {
                let row = &lv.data()[(i * t + t - 1) * v..(i * t + t) * v];
                (0..v).map(|k| log_softmax_at(row, k)).collect()
            })
            .collect())
    }

    /// Beam-search caption for one pair. `opts.t_max` may not exceed the
    /// decoder's position table.
    pub fn generate(
        &self,
        store: &ParamStore,
        x_rgb: Option<&Tensor>,
        x_sem: Option<&Tensor>,
        opts: &BeamOptions,
    ) -> Result<CaptionHypothesis> {
        if opts.t_max > self.config.t_max {
            return Err(Error::InvalidArgument(format!(
                "t_max {} exceeds the decoder's {} positions",
                opts.t_max, self.config.t_max
            )));
        }
        beam_search(self.config.vocab_size, opts, |prefixes| {
            self.next_log_probs(store, x_rgb, x_sem, prefixes)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamOptions {
    pub beam_size: usize,
    /// Maximum number of generated tokens (the start token is not counted).
    pub t_max: usize,
    /// Finished and live hypotheses are ranked by `logprob / len^alpha`;
    /// `0` ranks by the raw sum.
    pub length_penalty: f64,
}

impl BeamOptions {
    pub fn new(beam_size: usize, t_max: usize) -> Self {
        Self {
            beam_size,
            t_max,
            length_penalty: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionHypothesis {
    /// Begins with `<start>`.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

impl CaptionHypothesis {
    pub fn generated(&self) -> &[usize] {
        &self.tokens[1..]
    }

    fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.logprob
        } else {
            self.logprob / (self.generated().len().max(1) as f64).powf(alpha)
        }
    }
}

/// Higher score first; equal scores fall back to the lexicographically lower
/// token sequence.
fn rank(a: &CaptionHypothesis, b: &CaptionHypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .total_cmp(&a.score(alpha))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over a next-token model. `step` receives the live prefixes and
/// returns, for each, log-probabilities over all `vocab` tokens.
pub fn beam_search<F>(vocab: usize, opts: &BeamOptions, mut step: F) -> Result<CaptionHypothesis>
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
{
    if opts.beam_size < 1 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    if opts.t_max < 1 {
        return Err(Error::InvalidArgument("t_max must be at least 1".into()));
    }
    let alpha = opts.length_penalty;
    let mut live = vec![CaptionHypothesis {
        tokens: vec![START],
        logprob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<CaptionHypothesis> = Vec::new();
    for t in 1..=opts.t_max {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let logps = step(&prefixes)?;
        let mut candidates = Vec::with_capacity(live.len() * vocab);
        for (h, lp) in live.iter().zip(&logps) {
            if lp.len() != vocab {
                return Err(Error::Shape(format!("step returned {} scores for {vocab} tokens", lp.len())));
            }
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                candidates.push(CaptionHypothesis {
                    tokens,
                    logprob: h.logprob + l,
                    finished: tok == END || t == opts.t_max,
                });
            }
        }
        candidates.sort_by(|a, b| rank(a, b, alpha));
        candidates.truncate(opts.beam_size);
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
        // log-probabilities only fall, so no live extension can overtake
        if alpha == 0.0 {
            let best_done = finished.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|h| h.logprob < best_done) {
                break;
            }
        }
    }
    finished.sort_by(|a, b| rank(a, b, alpha));
    live.sort_by(|a, b| rank(a, b, alpha));
    finished
        .into_iter()
        .next()
        .or_else(|| live.into_iter().next())
        .ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into()))
}

/// Step-wise argmax decoding (lower id on ties), the reference for beam 1.
pub fn greedy<F>(t_max: usize, mut step: F) -> Result<CaptionHypothesis>
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
{
    let mut h = CaptionHypothesis {
        tokens: vec![START],
        logprob: 0.0,
        finished: false,
    };
    for _ in 0..t_max {
        let lp = step(std::slice::from_ref(&h.tokens))?.remove(0);
        let (tok, l) = lp
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        h.tokens.push(tok);
        h.logprob += l;
        if tok == END {
            break;
        }
    }
    h.finished = true;
    Ok(h)
}
