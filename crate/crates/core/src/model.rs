//! The full captioner: two siamese encoders, enhancement and the gated decoder.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionRecord, Graph, Mode, NodeId};
use crate::dataset::{DatasetEntry, Vocabulary, END, PAD, START};
use crate::decoder::{BeamOptions, CaptionHypothesis, Decoder, DecoderConfig, Fusion};
use crate::encoder::{
    rgb_to_tensor, sem_to_tensor, BackboneConfig, BackboneKind, ConvStage, Encoder, EncoderConfig, EncoderId,
    PositionalKind, SemanticInput,
};
use crate::enhancement::{Enhancement, EnhancementConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dropout: f64,
    /// Cross-modal attention in the enhancement stages.
    pub cmca: bool,
    /// Difference attention in the enhancement stages.
    pub udca: bool,
    pub fusion: Fusion,
    pub decoder_layers: usize,
    /// Decoder positions: the start token plus up to `t_max - 1` words.
    pub t_max: usize,
}

/// Everything about the network except the ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub dropout: f64,
    pub decoder_layers: usize,
    /// Decoder positions: the start token plus up to `t_max - 1` words.
    pub t_max: usize,
}

impl Architecture {
    /// 256x256 inputs, 8x8 grid, `D = 512`, 8 heads.
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig {
                backbone: BackboneConfig::default_tiny(),
                image_side: 256,
                heads: 8,
                positional: PositionalKind::Sinusoidal,
                pos_per_modality: false,
                semantic_input: SemanticInput::Palette,
            },
            dropout: 0.1,
            decoder_layers: 1,
            t_max: 30,
        }
    }

    /// A desk-scale model for 16x16 synthetic images: 4x4 grid, `D = 16`.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                backbone: BackboneConfig {
                    kind: BackboneKind::TinyCnn,
                    stages: vec![ConvStage::new(8, 2, 2, 0), ConvStage::new(16, 3, 2, 1)],
                    out_channels: 16,
                    grid_side: 4,
                    projection_dim: 16,
                },
                image_side: 16,
                heads: 2,
                positional: PositionalKind::Sinusoidal,
                pos_per_modality: false,
                semantic_input: SemanticInput::Palette,
            },
            dropout: 0.0,
            decoder_layers: 1,
            t_max: 16,
        }
    }
}

impl ModelConfig {
    pub fn from_parts(arch: Architecture, cmca: bool, udca: bool, fusion: Fusion) -> Self {
        Self {
            encoder: arch.encoder,
            dropout: arch.dropout,
            cmca,
            udca,
            fusion,
            decoder_layers: arch.decoder_layers,
            t_max: arch.t_max,
        }
    }

    pub fn full() -> Self {
        Self::from_parts(Architecture::full(), true, true, Fusion::Dual)
    }

    pub fn tiny() -> Self {
        Self::from_parts(Architecture::tiny(), true, true, Fusion::Dual)
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.t_max < 2 {
            return Err(Error::Config("t_max must leave room for at least one word".into()));
        }
        Ok(())
    }

    /// Whether semantic maps influence the caption at all.
    pub fn needs_semantic(&self) -> bool {
        self.cmca || self.fusion.uses_sem()
    }
}

/// Four `[B, H, W, C]` image tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub rgb_before: Tensor,
    pub rgb_after: Tensor,
    pub sem_before: Tensor,
    pub sem_after: Tensor,
}

impl ImageBatch {
    pub fn from_entries(entries: &[&DatasetEntry], semantic: SemanticInput) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let side = entries[0].image_side();
        if let Some(e) = entries.iter().find(|e| e.image_side() != side) {
            return Err(Error::Shape(format!("entry {} is not {side}px like the rest of the batch", e.id)));
        }
        let stack = |f: &dyn Fn(&DatasetEntry) -> Tensor| Tensor::stack(&entries.iter().map(|e| f(e)).collect::<Vec<_>>());
        Ok(Self {
            rgb_before: stack(&|e| rgb_to_tensor(&e.rgb_before)),
            rgb_after: stack(&|e| rgb_to_tensor(&e.rgb_after)),
            sem_before: stack(&|e| sem_to_tensor(&e.sem_before, semantic)),
            sem_after: stack(&|e| sem_to_tensor(&e.sem_after, semantic)),
        })
    }

    /// A single pair from `[rgb_before, rgb_after, sem_before, sem_after]`.
    pub fn from_images(images: [&image::RgbImage; 4], semantic: SemanticInput) -> Result<Self> {
        let dims = images[0].dimensions();
        if images.iter().any(|i| i.dimensions() != dims) {
            return Err(Error::Shape("all four images must have the same size".into()));
        }
        let one = |t: Tensor| Tensor::stack(&[t]);
        Ok(Self {
            rgb_before: one(rgb_to_tensor(images[0])),
            rgb_after: one(rgb_to_tensor(images[1])),
            sem_before: one(sem_to_tensor(images[2], semantic)),
            sem_after: one(sem_to_tensor(images[3], semantic)),
        })
    }

    pub fn len(&self) -> usize {
        self.rgb_before.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self, b: usize) -> ImageBatch {
        let one = |t: &Tensor| Tensor::stack(&[t.batch_item(b)]);
        Self {
            rgb_before: one(&self.rgb_before),
            rgb_after: one(&self.rgb_after),
            sem_before: one(&self.sem_before),
            sem_after: one(&self.sem_after),
        }
    }
}

/// Teacher-forcing rows for one caption: `[<start>, w...]` in and `[w..., <end>]`
/// out, truncated so the input fits `t_max` positions.
pub fn teacher_pair(vocab: &Vocabulary, caption: &[String], t_max: usize) -> (Vec<usize>, Vec<usize>) {
    let mut words = vocab.encode(caption);
    words.truncate(t_max - 1);
    let mut input = vec![START];
    input.extend(&words);
    let mut target = words;
    target.push(END);
    (input, target)
}

/// Right-pads rows with `<pad>` to a common length.
pub fn pad_rows(rows: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let len = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            r.resize(len, PAD);
            r
        })
        .collect()
}

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub enc_rgb: Encoder,
    pub enc_sem: Encoder,
    pub enhancement: Enhancement,
    pub decoder: Decoder,
}

/// Output of [`Model::caption_with_attention`].
#[derive(Debug, Clone)]
pub struct CaptionTrace {
    pub hypothesis: CaptionHypothesis,
    /// Every attention map of a teacher-forced pass over the final caption.
    pub records: Vec<AttentionRecord>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let d = config.dim();
        let heads = config.encoder.heads;
        let mut enh = EnhancementConfig::new(d, heads);
        enh.dropout = config.dropout;
        enh.cmca = config.cmca;
        enh.udca = config.udca;
        let mut dec = DecoderConfig::new(2 * d, heads, vocab_size);
        dec.t_max = config.t_max;
        dec.layers = config.decoder_layers;
        dec.dropout = config.dropout;
        dec.fusion = config.fusion;
        Ok(Self {
            enc_rgb: Encoder::new(EncoderId::Rgb, config.encoder.clone())?,
            enc_sem: Encoder::new(EncoderId::Sem, config.encoder.clone())?,
            enhancement: Enhancement::new(enh)?,
            decoder: Decoder::new(dec)?,
            config,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.config.vocab_size
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.enc_rgb.init(store, rng);
        self.enc_sem.init(store, rng);
        self.enhancement.init(store, rng);
        self.decoder.init(store, rng);
    }

    /// Fresh parameters from a seed.
    pub fn init_store(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        self.init(&mut store, &mut rng);
        store
    }

    /// Enhanced `(x_rgb, x_sem)` grids, `[B, N, 2D]` each.
    pub fn encode(&self, g: &mut Graph, images: &ImageBatch) -> Result<(NodeId, NodeId)> {
        let rb = g.constant(images.rgb_before.clone());
        let ra = g.constant(images.rgb_after.clone());
        let sb = g.constant(images.sem_before.clone());
        let sa = g.constant(images.sem_after.clone());
        let (f1, f2) = self.enc_rgb.encode_pair(g, rb, ra)?;
        let (f3, f4) = self.enc_sem.encode_pair(g, sb, sa)?;
        self.enhancement.enhance(g, [f1, f2, f3, f4])
    }

    fn streams(&self, x_rgb: NodeId, x_sem: NodeId) -> (Option<NodeId>, Option<NodeId>) {
        let f = self.config.fusion;
        (f.uses_rgb().then_some(x_rgb), f.uses_sem().then_some(x_sem))
    }

    /// Teacher-forced logits `[B, T, V]`.
    pub fn logits(&self, g: &mut Graph, images: &ImageBatch, inputs: &[Vec<usize>]) -> Result<NodeId> {
        if inputs.len() != images.len() {
            return Err(Error::Shape(format!("{} token rows for {} images", inputs.len(), images.len())));
        }
        let (x_rgb, x_sem) = self.encode(g, images)?;
        let (r, s) = self.streams(x_rgb, x_sem);
        self.decoder.forward(g, inputs, r, s)
    }

    /// Mean cross-entropy over non-pad targets.
    pub fn loss(&self, g: &mut Graph, images: &ImageBatch, inputs: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<NodeId> {
        let logits = self.logits(g, images, inputs)?;
        let flat: Vec<usize> = targets.iter().flatten().copied().collect();
        g.cross_entropy(logits, &flat, PAD)
            .ok_or_else(|| Error::InvalidArgument("every target position is padding".into()))
    }

    fn encoded_values(&self, store: &ParamStore, images: &ImageBatch) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(store, Mode::Eval);
        let (r, s) = self.encode(&mut g, images)?;
        Ok((g.value(r).clone(), g.value(s).clone()))
    }

    /// Beam-search caption for a single pair (`images.len() == 1`).
    pub fn caption(&self, store: &ParamStore, images: &ImageBatch, opts: &BeamOptions) -> Result<CaptionHypothesis> {
        if images.len() != 1 {
            return Err(Error::Shape("caption expects a single image pair".into()));
        }
        let (r, s) = self.encoded_values(store, images)?;
        let f = self.config.fusion;
        self.decoder
            .generate(store, f.uses_rgb().then_some(&r), f.uses_sem().then_some(&s), opts)
    }

    /// Caption plus the attention maps of every module for that caption.
    pub fn caption_with_attention(&self, store: &ParamStore, images: &ImageBatch, opts: &BeamOptions) -> Result<CaptionTrace> {
        let hypothesis = self.caption(store, images, opts)?;
        let mut g = Graph::new(store, Mode::Eval);
        g.enable_recording();
        // the last generated token is never fed back, so drop it from the input
        let input = hypothesis.tokens[..hypothesis.tokens.len() - 1].to_vec();
        self.logits(&mut g, images, &[input])?;
        Ok(CaptionTrace {
            hypothesis,
            records: g.take_records(),
        })
    }
}
