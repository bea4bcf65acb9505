//! Attention map export: raw arrays with JSON sidecars and heatmap overlays.
//!
//! Every map is written as little-endian `f64` (`<name>.bin`) with a sidecar
//! (`<name>.json`) holding its shape, module, modality, token index and
//! aggregation. Heatmaps are upsampled bilinearly from `G x G` to the image
//! size, scaled by the map maximum, colored with a fixed jet ramp
//! (blue -> cyan -> yellow -> red) and blended half-and-half with the image
//! they overlay.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autograd::AttentionRecord;
use crate::dataset::{DatasetEntry, Vocabulary, END};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Sem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    HeadMean,
    HeadMax,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::HeadMean => "mean",
            Aggregation::HeadMax => "max",
        }
    }
}

/// Which input image a map is drawn over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlay {
    RgbBefore,
    RgbAfter,
    SemBefore,
    SemAfter,
}

/// The four input images of one pair, as overlay backgrounds.
#[derive(Debug, Clone, Copy)]
pub struct OverlayImages<'a> {
    pub rgb_before: &'a RgbImage,
    pub rgb_after: &'a RgbImage,
    pub sem_before: &'a RgbImage,
    pub sem_after: &'a RgbImage,
}

impl<'a> OverlayImages<'a> {
    pub fn of(e: &'a DatasetEntry) -> Self {
        Self { rgb_before: &e.rgb_before, rgb_after: &e.rgb_after, sem_before: &e.sem_before, sem_after: &e.sem_after }
    }

    pub fn get(&self, o: Overlay) -> &'a RgbImage {
        match o {
            Overlay::RgbBefore => self.rgb_before,
            Overlay::RgbAfter => self.rgb_after,
            Overlay::SemBefore => self.sem_before,
            Overlay::SemAfter => self.sem_after,
        }
    }
}

/// Sidecar metadata of one exported array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub name: String,
    /// Label of the attention call that produced the map.
    pub module: String,
    pub modality: Modality,
    pub aggregation: Aggregation,
    /// Decoder position (0 predicts the first word); `None` for encoder maps
    /// and decoder summaries.
    pub token_index: Option<usize>,
    /// The word generated at `token_index`.
    pub token: Option<String>,
    pub overlay: Overlay,
    /// Shape of the array in the `.bin` file.
    pub shape: Vec<usize>,
}

/// One `G x G` map (or a raw attention matrix) ready to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub meta: MapMeta,
    pub data: Tensor,
}

/// Words that carry no location or object content.
pub const STOP_WORDS: [&str; 24] = [
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "has", "have", "of", "in", "on", "at", "to", "and",
    "with", "there", "some", "into", "by", "from", "<end>",
];

pub fn is_content_word(w: &str) -> bool {
    !STOP_WORDS.contains(&w)
}

fn encoder_target(label: &str) -> Option<(Modality, Overlay)> {
    // enh.stage{s}.{cmca.r|udca.f}{i}: index 1..4 follows f1..f4
    let idx = label.chars().last()?.to_digit(10)?;
    Some(match idx {
        1 => (Modality::Rgb, Overlay::RgbBefore),
        2 => (Modality::Rgb, Overlay::RgbAfter),
        3 => (Modality::Sem, Overlay::SemBefore),
        4 => (Modality::Sem, Overlay::SemAfter),
        _ => return None,
    })
}

/// Mean over query rows of a `[queries, keys]` matrix: where the module
/// looks on average. Rows are distributions, so the result is one too.
fn mean_rows(t: &Tensor, queries: usize, keys: usize) -> Tensor {
    let mut out = vec![0.0; keys];
    for q in 0..queries {
        for (k, o) in out.iter_mut().enumerate() {
            *o += t.data()[q * keys + k];
        }
    }
    out.iter_mut().for_each(|v| *v /= queries as f64);
    Tensor::new(vec![keys], out)
}

fn as_grid(t: Tensor, side: usize) -> Result<Tensor> {
    if t.len() != side * side {
        return Err(Error::Shape(format!("{} keys do not form a {side}x{side} grid", t.len())));
    }
    Ok(t.reshape(&[side, side]))
}

fn aggregated(r: &AttentionRecord, agg: Aggregation) -> &Tensor {
    match agg {
        Aggregation::HeadMean => &r.head_mean,
        Aggregation::HeadMax => &r.head_max,
    }
}

/// Encoder maps (CMCA and UDCA, per stage) and decoder maps (per token and
/// per modality, plus content-word summaries) from the records of a
/// single-pair captioning pass. `tokens` is the caption including the start
/// token.
pub fn collect_maps(records: &[AttentionRecord], tokens: &[usize], vocab: &Vocabulary, side: usize) -> Result<Vec<AttentionMap>> {
    let mut maps = Vec::new();
    for r in records {
        let shape = r.head_mean.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::Shape(format!("{} attention has shape {shape:?}, expected [1, Q, K]", r.label)));
        }
        let (queries, keys) = (shape[1], shape[2]);
        let slug = r.label.replace('.', "_");
        if r.label.starts_with("enh.") {
            let Some((modality, overlay)) = encoder_target(&r.label) else { continue };
            for agg in [Aggregation::HeadMean, Aggregation::HeadMax] {
                let t = aggregated(r, agg);
                let meta = |name: String, shape: Vec<usize>| MapMeta {
                    name,
                    module: r.label.clone(),
                    modality,
                    aggregation: agg,
                    token_index: None,
                    token: None,
                    overlay,
                    shape,
                };
                maps.push(AttentionMap {
                    meta: meta(format!("{slug}_{}_raw", agg.as_str()), vec![queries, keys]),
                    data: t.clone().reshape(&[queries, keys]),
                });
                maps.push(AttentionMap {
                    meta: meta(format!("{slug}_{}", agg.as_str()), vec![side, side]),
                    data: as_grid(mean_rows(t, queries, keys), side)?,
                });
            }
        } else if let Some(modality) = decoder_modality(&r.label) {
            let overlay = if modality == Modality::Rgb { Overlay::RgbAfter } else { Overlay::SemAfter };
            for agg in [Aggregation::HeadMean, Aggregation::HeadMax] {
                let t = aggregated(r, agg);
                let mut content = Vec::new();
                for q in 0..queries {
                    let row = Tensor::new(vec![keys], t.data()[q * keys..(q + 1) * keys].to_vec());
                    let word = tokens.get(q + 1).map(|&id| if id == END { "<end>".to_string() } else { vocab.token(id).to_string() });
                    if word.as_deref().is_some_and(is_content_word) {
                        content.push(row.clone());
                    }
                    maps.push(AttentionMap {
                        meta: MapMeta {
                            name: format!("{slug}_{}_t{q:02}", agg.as_str()),
                            module: r.label.clone(),
                            modality,
                            aggregation: agg,
                            token_index: Some(q),
                            token: word,
                            overlay,
                            shape: vec![side, side],
                        },
                        data: as_grid(row, side)?,
                    });
                }
                if !content.is_empty() {
                    let mut sum = Tensor::zeros(&[keys]);
                    for c in &content {
                        sum.add_assign(c);
                    }
                    let n = content.len() as f64;
                    maps.push(AttentionMap {
                        meta: MapMeta {
                            name: format!("{slug}_{}_summary", agg.as_str()),
                            module: r.label.clone(),
                            modality,
                            aggregation: agg,
                            token_index: None,
                            token: None,
                            overlay,
                            shape: vec![side, side],
                        },
                        data: as_grid(sum.map(|v| v / n), side)?,
                    });
                }
            }
        }
    }
    Ok(maps)
}

fn decoder_modality(label: &str) -> Option<Modality> {
    if label.ends_with(".cross_rgb") {
        Some(Modality::Rgb)
    } else if label.ends_with(".cross_sem") {
        Some(Modality::Sem)
    } else {
        None
    }
}

/// Bilinear resize of a `[G, G]` map to `width x height` (pixel centers
/// aligned, edges clamped).
pub fn upsample_bilinear(map: &Tensor, width: u32, height: u32) -> Vec<f64> {
    let (gh, gw) = (map.shape()[0], map.shape()[1]);
    let at = |y: usize, x: usize| map.data()[y * gw + x];
    let coord = |i: u32, out: u32, g: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * g as f64 / out as f64 - 0.5).clamp(0.0, (g - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(g - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, gh);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, gw);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Jet ramp for `v` in `[0, 1]`.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Heatmap of `map` blended over `base`.
pub fn render_overlay(map: &Tensor, base: &RgbImage) -> RgbImage {
    let (w, h) = base.dimensions();
    let up = upsample_bilinear(map, w, h);
    let max = up.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    RgbImage::from_fn(w, h, |x, y| {
        let c = jet(up[(y * w + x) as usize] * scale);
        let b = base.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|i| ((b[i] as u16 + c[i] as u16) / 2) as u8))
    })
}

/// Writes `.bin` + `.json` for every map, and a `.png` overlay for every
/// `G x G` map.
pub fn write_maps(dir: &Path, maps: &[AttentionMap], images: OverlayImages<'_>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in maps {
        let bin = dir.join(format!("{}.bin", m.meta.name));
        let bytes: Vec<u8> = m.data.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let json = dir.join(format!("{}.json", m.meta.name));
        std::fs::write(&json, serde_json::to_string_pretty(&m.meta)?).map_err(|e| Error::io(&json, e))?;
        if m.meta.shape.len() == 2 && !m.meta.name.ends_with("_raw") {
            let png = dir.join(format!("{}.png", m.meta.name));
            render_overlay(&m.data, images.get(m.meta.overlay)).save(&png)?;
        }
    }
    Ok(())
}

/// Reads back one `.bin` array using its sidecar.
pub fn read_map(dir: &Path, name: &str) -> Result<AttentionMap> {
    let json = dir.join(format!("{name}.json"));
    let meta: MapMeta = serde_json::from_str(&std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?)?;
    let bin = dir.join(format!("{name}.bin"));
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if data.len() != meta.shape.iter().product::<usize>() {
        return Err(Error::Shape(format!("{name}.bin holds {} values, sidecar says {:?}", data.len(), meta.shape)));
    }
    Ok(AttentionMap { data: Tensor::new(meta.shape.clone(), data), meta })
}
