//! Small synthetic corpora for tests, examples and smoke runs.
//!
//! Images are flat backgrounds with one square patch in a quadrant. The
//! semantic maps are black (unlabeled) except for the changed patch, which is
//! painted with the palette color of the `from` class before and the `to`
//! class after.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ChangeCategory, DatasetEntry, LandCover, Split};

pub const FIXTURE_SIDE: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "top left",
            Quadrant::TopRight => "top right",
            Quadrant::BottomLeft => "bottom left",
            Quadrant::BottomRight => "bottom right",
        }
    }

    /// Top-left corner of the patch for an image of `side` pixels.
    fn origin(self, side: u32) -> (u32, u32) {
        let h = side / 2;
        let m = side / 8;
        match self {
            Quadrant::TopLeft => (m, m),
            Quadrant::TopRight => (h + m, m),
            Quadrant::BottomLeft => (m, h + m),
            Quadrant::BottomRight => (h + m, h + m),
        }
    }
}

/// The object word used in captions for a class that appears.
fn noun(class: LandCover) -> &'static str {
    match class {
        LandCover::LowVegetation => "grass",
        LandCover::NvgSurface => "road",
        LandCover::Tree => "trees",
        LandCover::Water => "pond",
        LandCover::Building => "building",
        LandCover::Playground => "playground",
    }
}

/// RGB appearance of a class in the optical images.
fn optical(class: LandCover) -> [u8; 3] {
    match class {
        LandCover::LowVegetation => [110, 170, 90],
        LandCover::NvgSurface => [150, 150, 140],
        LandCover::Tree => [40, 110, 40],
        LandCover::Water => [40, 70, 180],
        LandCover::Building => [200, 190, 170],
        LandCover::Playground => [190, 80, 60],
    }
}

fn fill(side: u32, color: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(side, side, Rgb(color))
}

fn paint(img: &mut RgbImage, q: Quadrant, color: [u8; 3]) {
    let side = img.width();
    let (x0, y0) = q.origin(side);
    let size = (side / 4).max(1);
    for y in y0..(y0 + size).min(side) {
        for x in x0..(x0 + size).min(side) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

/// Four images for a change of `from` into `to` at `q`, drawn on `background`.
pub fn change_images(side: u32, background: [u8; 3], from: LandCover, to: LandCover, q: Quadrant) -> [RgbImage; 4] {
    let mut a = fill(side, background);
    let mut b = fill(side, background);
    paint(&mut a, q, optical(from));
    paint(&mut b, q, optical(to));
    let mut la = fill(side, [0, 0, 0]);
    let mut lb = fill(side, [0, 0, 0]);
    paint(&mut la, q, from.color());
    paint(&mut lb, q, to.color());
    [a, b, la, lb]
}

/// Identical before/after images with empty semantic maps.
pub fn no_change_images(side: u32, background: [u8; 3]) -> [RgbImage; 4] {
    [fill(side, background), fill(side, background), fill(side, [0, 0, 0]), fill(side, [0, 0, 0])]
}

/// Split sizes for `n` entries at a 7:1:2 ratio (train, val, test).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n * 7 + 5) / 10;
    let val = ((n + 5) / 10).min(n - train);
    (train, val, n - train - val)
}

fn change_sentences(rng: &mut ChaCha8Rng, to: LandCover, q: Quadrant) -> Vec<String> {
    let obj = noun(to);
    let at = q.phrase();
    let templates = [
        format!("a {obj} appears at the {at}"),
        format!("a new {obj} is built at the {at}"),
        format!("there is a {obj} at the {at} of the scene"),
        format!("the {at} area is replaced by a {obj}"),
        format!("a {obj} emerges at the {at}"),
        format!("A {obj} has appeared in the {at} corner."),
    ];
    let mut picks: Vec<String> = templates.to_vec();
    picks.shuffle(rng);
    picks.truncate(5);
    picks
}

fn no_change_sentences(rng: &mut ChaCha8Rng) -> Vec<String> {
    let templates = [
        "no change",
        "there is no difference",
        "the scene remains the same",
        "nothing has changed",
        "the two images are identical",
        "No change.",
    ];
    let mut picks: Vec<String> = templates.iter().map(|s| s.to_string()).collect();
    picks.shuffle(rng);
    picks.truncate(5);
    picks
}

/// A corpus of `n` entries with a 7:1:2 split in index order (train first),
/// about a third of them no-change. Deterministic in `seed`.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<DatasetEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, val, _) = split_sizes(n);
    (0..n)
        .map(|i| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            let background = [rng.gen_range(60..120), rng.gen_range(90..140), rng.gen_range(50..100)];
            let id = format!("syn{i:04}");
            if i % 3 == 0 {
                let s = no_change_sentences(&mut rng);
                DatasetEntry::new(id, no_change_images(FIXTURE_SIDE, background), s, ChangeCategory::NoChange, split)
            } else {
                let from = *LandCover::ALL.choose(&mut rng).unwrap();
                let to = loop {
                    let c = *LandCover::ALL.choose(&mut rng).unwrap();
                    if c != from {
                        break c;
                    }
                };
                let q = *Quadrant::ALL.choose(&mut rng).unwrap();
                let s = change_sentences(&mut rng, to, q);
                let cat = ChangeCategory::Transition { from, to };
                DatasetEntry::new(id, change_images(FIXTURE_SIDE, background, from, to, q), s, cat, split)
            }
            .expect("fixture entries are valid by construction")
        })
        .collect()
}

/// Eight training entries with one caption each (repeated five times), for
/// memorization runs. Every caption is distinct and every image pair differs.
pub fn overfit_fixture() -> Vec<DatasetEntry> {
    let low = LandCover::LowVegetation;
    let specs: [(&str, Option<(LandCover, LandCover, Quadrant)>, [u8; 3]); 8] = [
        ("no change", None, [90, 120, 70]),
        ("no change", None, [140, 140, 130]),
        ("a building appears at the top left", Some((low, LandCover::Building, Quadrant::TopLeft)), [90, 120, 70]),
        ("a building appears at the top right", Some((low, LandCover::Building, Quadrant::TopRight)), [90, 120, 70]),
        ("a building appears at the bottom left", Some((low, LandCover::Building, Quadrant::BottomLeft)), [90, 120, 70]),
        ("a building appears at the bottom right", Some((low, LandCover::Building, Quadrant::BottomRight)), [90, 120, 70]),
        ("a pond appears at the top left", Some((low, LandCover::Water, Quadrant::TopLeft)), [90, 120, 70]),
        ("the trees are removed at the bottom right", Some((LandCover::Tree, low, Quadrant::BottomRight)), [90, 120, 70]),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, (caption, change, bg))| {
            let sentences = vec![caption.to_string(); 5];
            let (images, cat) = match change {
                None => (no_change_images(FIXTURE_SIDE, *bg), ChangeCategory::NoChange),
                Some((from, to, q)) => (
                    change_images(FIXTURE_SIDE, *bg, *from, *to, *q),
                    ChangeCategory::Transition { from: *from, to: *to },
                ),
            };
            DatasetEntry::new(format!("fit{i}"), images, sentences, cat, Split::Train).expect("valid fixture entry")
        })
        .collect()
}
