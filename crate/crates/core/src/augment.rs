//! Hybrid augmentation: photometric transforms that copy captions verbatim,
//! and geometric transforms that rewrite directional words to match.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetEntry, Split, SplitCounts};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Blur,
    Brighten,
    MirrorH,
    Rotate180,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::Blur,
        AugmentKind::Brighten,
        AugmentKind::MirrorH,
        AugmentKind::Rotate180,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::Blur => "blur",
            AugmentKind::Brighten => "brighten",
            AugmentKind::MirrorH => "mirror_h",
            AugmentKind::Rotate180 => "rotate_180",
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(self, AugmentKind::MirrorH | AugmentKind::Rotate180)
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub brighten_delta: u8,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind) -> Self {
        Self {
            kind,
            blur_kernel: 5,
            blur_sigma: 1.0,
            brighten_delta: 30,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_kernel < 3 || self.blur_kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "blur kernel must be odd and at least 3, got {}",
                self.blur_kernel
            )));
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("blur sigma must be positive, got {}", self.blur_sigma)));
        }
        Ok(())
    }
}

/// Word substitutions applied by a geometric transform. Each map is its own
/// inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionMap {
    pairs: Vec<(&'static str, &'static str)>,
}

const HORIZONTAL: [(&str, &str); 2] = [("left", "right"), ("leftside", "rightside")];
const VERTICAL: [(&str, &str); 4] = [("top", "bottom"), ("upper", "lower"), ("above", "below"), ("up", "down")];

impl DirectionMap {
    pub fn mirror_h() -> Self {
        Self { pairs: HORIZONTAL.to_vec() }
    }

    pub fn rotate_180() -> Self {
        Self {
            pairs: HORIZONTAL.iter().chain(VERTICAL.iter()).copied().collect(),
        }
    }

    pub fn for_kind(kind: AugmentKind) -> Option<Self> {
        match kind {
            AugmentKind::MirrorH => Some(Self::mirror_h()),
            AugmentKind::Rotate180 => Some(Self::rotate_180()),
            _ => None,
        }
    }

    /// Image of a lowercase word under the map, if it is directional.
    pub fn map_word(&self, word: &str) -> Option<&'static str> {
        self.pairs.iter().find_map(|&(a, b)| {
            if word == a {
                Some(b)
            } else if word == b {
                Some(a)
            } else {
                None
            }
        })
    }

    /// Substitutes every directional token at once.
    pub fn apply_tokens(&self, tokens: &[String]) -> Vec<String> {
        tokens
            .iter()
            .map(|t| self.map_word(t).map_or_else(|| t.clone(), str::to_string))
            .collect()
    }

    /// Rewrites whole words of a raw sentence, keeping punctuation and the
    /// case pattern (lower, Title or UPPER) of each replaced word.
    pub fn apply_sentence(&self, sentence: &str) -> String {
        let mut out = String::with_capacity(sentence.len());
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut String| {
            if word.is_empty() {
                return;
            }
            match self.map_word(&word.to_lowercase()) {
                Some(rep) => out.push_str(&match_case(word, rep)),
                None => out.push_str(word),
            }
            word.clear();
        };
        for c in sentence.chars() {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                flush(&mut word, &mut out);
                out.push(c);
            }
        }
        flush(&mut word, &mut out);
        out
    }
}

fn match_case(original: &str, replacement: &str) -> String {
    let upper = original.chars().all(|c| !c.is_lowercase());
    let title = original.chars().next().is_some_and(char::is_uppercase);
    if upper && original.chars().count() > 1 {
        replacement.to_uppercase()
    } else if title {
        let mut cs = replacement.chars();
        cs.next()
            .map(|f| f.to_uppercase().chain(cs).collect())
            .unwrap_or_default()
    } else {
        replacement.to_string()
    }
}

/// Normalized 1-D Gaussian weights of odd length `k`.
fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    let w: Vec<f64> = (0..k)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders and rounding.
pub fn gaussian_blur(img: &RgbImage, kernel: usize, sigma: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let k = gaussian_kernel(kernel, sigma);
    let r = (kernel / 2) as i64;
    let clamp = |v: i64, hi: u32| v.clamp(0, i64::from(hi) - 1) as u32;
    let mut tmp = vec![[0.0f64; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (i, kw) in k.iter().enumerate() {
                let sx = clamp(i64::from(x) + i as i64 - r, w);
                let p = img.get_pixel(sx, y).0;
                for c in 0..3 {
                    acc[c] += kw * f64::from(p[c]);
                }
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0.0; 3];
        for (i, kw) in k.iter().enumerate() {
            let sy = clamp(i64::from(y) + i as i64 - r, h);
            let p = tmp[(sy * w + x) as usize];
            for c in 0..3 {
                acc[c] += kw * p[c];
            }
        }
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

pub fn brighten(img: &RgbImage, delta: u8) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        p.0 = p.0.map(|v| v.saturating_add(delta));
    }
    out
}

fn geometric(img: &RgbImage, kind: AugmentKind) -> RgbImage {
    match kind {
        AugmentKind::MirrorH => imageops::flip_horizontal(img),
        AugmentKind::Rotate180 => imageops::rotate180(img),
        _ => img.clone(),
    }
}

/// Applies one transform and returns a new entry with id `<id>_aug_<kind>`.
pub fn augment_entry(entry: &DatasetEntry, spec: &AugmentSpec) -> Result<DatasetEntry> {
    spec.validate()?;
    let mut out = entry.clone();
    out.id = format!("{}_aug_{}", entry.id, spec.kind);
    match spec.kind {
        AugmentKind::Blur => {
            out.rgb_before = Arc::new(gaussian_blur(&entry.rgb_before, spec.blur_kernel, spec.blur_sigma));
            out.rgb_after = Arc::new(gaussian_blur(&entry.rgb_after, spec.blur_kernel, spec.blur_sigma));
        }
        AugmentKind::Brighten => {
            out.rgb_before = Arc::new(brighten(&entry.rgb_before, spec.brighten_delta));
            out.rgb_after = Arc::new(brighten(&entry.rgb_after, spec.brighten_delta));
        }
        kind @ (AugmentKind::MirrorH | AugmentKind::Rotate180) => {
            out.rgb_before = Arc::new(geometric(&entry.rgb_before, kind));
            out.rgb_after = Arc::new(geometric(&entry.rgb_after, kind));
            out.sem_before = Arc::new(geometric(&entry.sem_before, kind));
            out.sem_after = Arc::new(geometric(&entry.sem_after, kind));
            let map = DirectionMap::for_kind(kind).expect("geometric kinds have a map");
            out.set_sentences(entry.sentences.iter().map(|s| map.apply_sentence(s)).collect());
        }
    }
    out.validate()?;
    Ok(out)
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Per-entry random stream derived from the corpus seed and the entry id,
/// so the choice does not depend on processing order.
pub fn entry_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(id.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&bytes))
}

pub fn choose_kind(seed: u64, id: &str) -> AugmentKind {
    AugmentKind::ALL[entry_rng(seed, id).gen_range(0..AugmentKind::ALL.len())]
}

/// Originals first, then one augmented copy of every train and val entry in
/// source order. Test entries are never augmented.
pub fn augment_corpus(entries: &[DatasetEntry], seed: u64) -> Result<Vec<DatasetEntry>> {
    let extra: Vec<DatasetEntry> = entries
        .par_iter()
        .filter(|e| e.split != Split::Test)
        .map(|e| {
            let spec = AugmentSpec {
                seed,
                ..AugmentSpec::new(choose_kind(seed, &e.id))
            };
            augment_entry(e, &spec)
        })
        .collect::<Result<_>>()?;
    let mut out = entries.to_vec();
    out.extend(extra);
    Ok(out)
}

/// Split sizes after augmentation: train and val double, test is unchanged.
pub fn augmented_counts(c: SplitCounts) -> SplitCounts {
    SplitCounts {
        train: 2 * c.train,
        val: 2 * c.val,
        test: c.test,
    }
}
