//! Siamese feature extraction, one backbone per modality.
//!
//! Each modality owns a backbone (`enc.rgb.*` or `enc.sem.*`). Both images of a
//! bitemporal pair go through the same weights, then a 1x1 projection maps the
//! backbone channels to `D` and a positional table is added. The result is a
//! `[B, N, D]` grid with `N = G * G`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, Linear};
use crate::params::{init_uniform, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderId {
    Rgb,
    Sem,
}

impl EncoderId {
    pub fn prefix(self) -> &'static str {
        match self {
            EncoderId::Rgb => "enc.rgb",
            EncoderId::Sem => "enc.sem",
        }
    }
}

impl fmt::Display for EncoderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderId::Rgb => "rgb",
            EncoderId::Sem => "sem",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Small strided CNN trained from scratch.
    TinyCnn,
    /// Externally supplied feature extractor (e.g. an ImageNet ResNet);
    /// only the projection is trained.
    PluggablePretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvStage {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { out_channels, kernel, stride, pad }
    }

    fn output_side(&self, side: usize) -> Option<usize> {
        (side + 2 * self.pad)
            .checked_sub(self.kernel)
            .map(|s| s / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    Sinusoidal,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticInput {
    /// The 3-channel palette rendering as distributed.
    Palette,
    /// One channel per land-cover class plus one for unlabeled pixels.
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Conv stages of the tiny CNN; each is conv + bias + ReLU.
    pub stages: Vec<ConvStage>,
    /// Channels entering the projection. For the tiny CNN this equals the
    /// last stage width; for a pluggable backbone it is the extractor's width.
    pub out_channels: usize,
    pub grid_side: usize,
    pub projection_dim: usize,
}

impl BackboneConfig {
    /// Four strided blocks (3 -> 32 -> 64 -> 128 -> 256), total stride 32,
    /// projected to `D = 512`: a 256x256 image becomes an 8x8 grid.
    pub fn default_tiny() -> Self {
        Self {
            kind: BackboneKind::TinyCnn,
            stages: vec![
                ConvStage::new(32, 4, 4, 0),
                ConvStage::new(64, 3, 2, 1),
                ConvStage::new(128, 3, 2, 1),
                ConvStage::new(256, 3, 2, 1),
            ],
            out_channels: 256,
            grid_side: 8,
            projection_dim: 512,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    /// Grid side produced from a square input of side `image_side`.
    pub fn grid_for(&self, image_side: usize) -> Option<usize> {
        self.stages
            .iter()
            .try_fold(image_side, |side, st| st.output_side(side))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: BackboneConfig,
    pub image_side: usize,
    pub heads: usize,
    pub positional: PositionalKind,
    /// Learned tables only: one table per modality instead of a shared one.
    pub pos_per_modality: bool,
    pub semantic_input: SemanticInput,
}

impl EncoderConfig {
    pub fn dim(&self) -> usize {
        self.backbone.projection_dim
    }

    pub fn positions(&self) -> usize {
        self.backbone.grid_side * self.backbone.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.grid_side == 0 {
            return Err(Error::Config("grid_side must be at least 1".into()));
        }
        if self.heads == 0 || b.projection_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "projection dim {} is not divisible by {} heads",
                b.projection_dim, self.heads
            )));
        }
        if b.kind == BackboneKind::TinyCnn {
            let last = b.stages.last().ok_or_else(|| Error::Config("tiny_cnn needs stages".into()))?;
            if last.out_channels != b.out_channels {
                return Err(Error::Config("out_channels must equal the last stage width".into()));
            }
            match b.grid_for(self.image_side) {
                Some(g) if g == b.grid_side => {}
                other => {
                    return Err(Error::Config(format!(
                        "stages map {}px to grid {other:?}, expected {}",
                        self.image_side, b.grid_side
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn input_channels(&self, id: EncoderId) -> usize {
        match (id, self.semantic_input) {
            (EncoderId::Sem, SemanticInput::OneHot) => crate::dataset::SEMANTIC_CHANNELS,
            _ => 3,
        }
    }

    fn pos_name(&self, id: EncoderId) -> String {
        if self.pos_per_modality {
            format!("{}.pos", id.prefix())
        } else {
            "enc.pos".to_string()
        }
    }
}

/// A frozen feature extractor standing in for a pretrained backbone.
///
/// `extract` maps one `[H, W, C]` image to a `[G, G, out_channels]` grid.
pub trait FeatureExtractor: Send + Sync {
    fn out_channels(&self) -> usize;
    fn extract(&self, image: &Tensor) -> Result<Tensor>;
}

#[derive(Clone)]
pub struct Encoder {
    pub id: EncoderId,
    pub config: EncoderConfig,
    projection: Linear,
    extractor: Option<Arc<dyn FeatureExtractor>>,
}

impl fmt::Debug for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Encoder")
            .field("id", &self.id)
            .field("config", &self.config)
            .field("extractor", &self.extractor.is_some())
            .finish()
    }
}

impl Encoder {
    pub fn new(id: EncoderId, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            id,
            projection: Linear::new(&format!("{}.proj", id.prefix())),
            config,
            extractor: None,
        })
    }

    pub fn with_extractor(mut self, extractor: Arc<dyn FeatureExtractor>) -> Result<Self> {
        if extractor.out_channels() != self.config.backbone.out_channels {
            return Err(Error::Config("extractor width disagrees with out_channels".into()));
        }
        self.extractor = Some(extractor);
        Ok(self)
    }

    fn conv_names(&self, i: usize) -> (String, String) {
        let p = self.id.prefix();
        (format!("{p}.conv{i}.w"), format!("{p}.conv{i}.b"))
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let b = &self.config.backbone;
        if b.kind == BackboneKind::TinyCnn {
            let mut cin = self.config.input_channels(self.id);
            for (i, st) in b.stages.iter().enumerate() {
                let (w, bias) = self.conv_names(i);
                let fan_in = st.kernel * st.kernel * cin;
                store.insert(w, init_uniform(&[st.kernel, st.kernel, cin, st.out_channels], fan_in, rng));
                store.insert(bias, Tensor::zeros(&[st.out_channels]));
                cin = st.out_channels;
            }
        }
        self.projection.init(store, b.out_channels, b.projection_dim, rng);
        if self.config.positional == PositionalKind::Learned {
            let name = self.config.pos_name(self.id);
            if store.get(&name).is_none() {
                let shape = [self.config.positions(), self.config.dim()];
                store.insert(name, Tensor::uniform(&shape, 0.02, rng));
            }
        }
    }

    /// Backbone plus projection, before positional embedding: `[B, N, D]`.
    pub fn features(&self, g: &mut Graph, images: NodeId) -> Result<NodeId> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("images must be [B, H, W, C], got {shape:?}")));
        }
        let channels = self.config.input_channels(self.id);
        if shape[3] != channels {
            return Err(Error::Shape(format!(
                "{} encoder expects {channels} channels, got {}",
                self.id, shape[3]
            )));
        }
        let b = &self.config.backbone;
        let grid = match b.kind {
            BackboneKind::TinyCnn => {
                let mut x = images;
                for (i, st) in b.stages.iter().enumerate() {
                    let (w, bias) = self.conv_names(i);
                    let w = g.param(&w);
                    let bias = g.param(&bias);
                    x = g.conv2d(x, w, bias, st.stride, st.pad);
                    x = g.relu(x);
                }
                x
            }
            BackboneKind::PluggablePretrained => {
                let extractor = self
                    .extractor
                    .as_ref()
                    .ok_or_else(|| Error::Config("pluggable backbone has no extractor attached".into()))?;
                let batch = g.value(images).clone();
                let feats = (0..shape[0])
                    .map(|i| extractor.extract(&batch.batch_item(i)))
                    .collect::<Result<Vec<_>>>()?;
                g.constant(Tensor::stack(&feats))
            }
        };
        let gs = g.shape(grid).to_vec();
        if gs[1] != b.grid_side || gs[2] != b.grid_side {
            return Err(Error::Shape(format!(
                "backbone produced a {}x{} grid, expected {}",
                gs[1], gs[2], b.grid_side
            )));
        }
        let projected = self.projection.forward(g, grid);
        Ok(g.reshape(projected, &[gs[0], gs[1] * gs[2], b.projection_dim]))
    }

    fn add_positional(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let pos = match self.config.positional {
            PositionalKind::Sinusoidal => {
                g.constant(sinusoidal_table(self.config.positions(), self.config.dim()))
            }
            PositionalKind::Learned => g.param(&self.config.pos_name(self.id)),
        };
        g.add_broadcast(x, pos)
    }

    /// Encodes a bitemporal pair with shared weights and adds positions.
    pub fn encode_pair(&self, g: &mut Graph, before: NodeId, after: NodeId) -> Result<(NodeId, NodeId)> {
        if g.shape(before) != g.shape(after) {
            return Err(Error::Shape(format!(
                "pair images differ in size: {:?} vs {:?}",
                g.shape(before),
                g.shape(after)
            )));
        }
        let f0 = self.features(g, before)?;
        let f1 = self.features(g, after)?;
        Ok((self.add_positional(g, f0), self.add_positional(g, f1)))
    }
}

/// Converts an 8-bit RGB image to a `[H, W, 3]` tensor in `[0, 1]`.
pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Converts a rendered semantic map to the encoder's input layout: the palette
/// image as is, or one channel per class (plus unlabeled) set to 1.
pub fn sem_to_tensor(img: &image::RgbImage, mode: SemanticInput) -> Tensor {
    match mode {
        SemanticInput::Palette => rgb_to_tensor(img),
        SemanticInput::OneHot => {
            let (w, h) = img.dimensions();
            let c = crate::dataset::SEMANTIC_CHANNELS;
            let mut data = vec![0.0; (w * h) as usize * c];
            for (i, p) in img.pixels().enumerate() {
                data[i * c + crate::dataset::LandCover::channel_of(p.0)] = 1.0;
            }
            Tensor::new(vec![h as usize, w as usize, c], data)
        }
    }
}
