//! SECOND-CC style corpora: entries, index loading and validation.
//!
//! On disk a corpus is
//!
//! ```text
//! root/A/<id>.png        RGB before
//! root/B/<id>.png        RGB after
//! root/labelA/<id>.png   semantic map before
//! root/labelB/<id>.png   semantic map after
//! root/index.json        {"entries":[{"id","split","category","sentences":[5 strings]}]}
//! ```

mod category;
pub mod fixture;
pub mod lint;
pub mod stats;
mod tokenize;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use category::{ChangeCategory, LandCover, SEMANTIC_CHANNELS};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{Vocabulary, END, PAD, START, UNK};

use crate::error::{Error, Result};

pub const CAPTIONS_PER_ENTRY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Index(format!("unknown split `{other}`"))),
        }
    }
}

/// One bitemporal sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub rgb_before: Arc<RgbImage>,
    pub rgb_after: Arc<RgbImage>,
    pub sem_before: Arc<RgbImage>,
    pub sem_after: Arc<RgbImage>,
    /// Raw reference sentences, exactly as annotated.
    pub sentences: Vec<String>,
    /// Tokenized references, one per sentence.
    pub captions: Vec<Vec<String>>,
    pub category: ChangeCategory,
    pub split: Split,
}

impl DatasetEntry {
    /// Builds an entry and checks its invariants: five captions and four
    /// images of identical size.
    pub fn new(
        id: impl Into<String>,
        images: [RgbImage; 4],
        sentences: Vec<String>,
        category: ChangeCategory,
        split: Split,
    ) -> Result<Self> {
        let [rgb_before, rgb_after, sem_before, sem_after] = images.map(Arc::new);
        let entry = Self {
            id: id.into(),
            captions: sentences.iter().map(|s| tokenize(s)).collect(),
            sentences,
            rgb_before,
            rgb_after,
            sem_before,
            sem_after,
            category,
            split,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences.len() != CAPTIONS_PER_ENTRY {
            return Err(Error::Schema {
                id: self.id.clone(),
                reason: format!("expected {CAPTIONS_PER_ENTRY} captions, found {}", self.sentences.len()),
            });
        }
        let dims = self.rgb_before.dimensions();
        for (name, img) in [
            ("rgb_after", &self.rgb_after),
            ("sem_before", &self.sem_before),
            ("sem_after", &self.sem_after),
        ] {
            if img.dimensions() != dims {
                return Err(Error::Schema {
                    id: self.id.clone(),
                    reason: format!("{name} is {:?} but rgb_before is {dims:?}", img.dimensions()),
                });
            }
        }
        Ok(())
    }

    pub fn is_change(&self) -> bool {
        self.category.is_change()
    }

    pub fn image_side(&self) -> u32 {
        self.rgb_before.width()
    }

    /// Replaces the raw sentences and re-tokenizes.
    pub fn set_sentences(&mut self, sentences: Vec<String>) {
        self.captions = sentences.iter().map(|s| tokenize(s)).collect();
        self.sentences = sentences;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IndexRecord {
    pub id: String,
    pub split: Split,
    pub category: String,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct IndexFile {
    pub entries: Vec<IndexRecord>,
}

impl IndexFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const IMAGE_DIRS: [&str; 4] = ["A", "B", "labelA", "labelB"];

pub fn image_path(root: &Path, dir: &str, id: &str) -> PathBuf {
    root.join(dir).join(format!("{id}.png"))
}

fn load_record(root: &Path, rec: &IndexRecord) -> Result<DatasetEntry> {
    if rec.sentences.len() != CAPTIONS_PER_ENTRY {
        return Err(Error::Schema {
            id: rec.id.clone(),
            reason: format!("expected {CAPTIONS_PER_ENTRY} captions, found {}", rec.sentences.len()),
        });
    }
    let category: ChangeCategory = rec.category.parse().map_err(|e: Error| Error::Schema {
        id: rec.id.clone(),
        reason: e.to_string(),
    })?;
    let load = |dir: &str| -> Result<RgbImage> {
        let path = image_path(root, dir, &rec.id);
        if !path.exists() {
            return Err(Error::Load {
                id: rec.id.clone(),
                reason: format!("missing image {}", path.display()),
            });
        }
        image::open(&path)
            .map(|img| img.to_rgb8())
            .map_err(|e| Error::Load {
                id: rec.id.clone(),
                reason: format!("{}: {e}", path.display()),
            })
    };
    let images = [load("A")?, load("B")?, load("labelA")?, load("labelB")?];
    DatasetEntry::new(rec.id.clone(), images, rec.sentences.clone(), category, rec.split)
}

/// Loads and validates every entry of an index. Splits are taken from the
/// index as-is. Images are decoded in parallel; output order follows the index.
pub fn load_index(root: &Path, index_file: &Path) -> Result<Vec<DatasetEntry>> {
    let index = IndexFile::read(index_file)?;
    let mut seen = std::collections::HashSet::new();
    for rec in &index.entries {
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::Index(format!("duplicate id `{}`", rec.id)));
        }
    }
    index.entries.par_iter().map(|rec| load_record(root, rec)).collect()
}

/// Writes images under `root/{A,B,labelA,labelB}` and `root/index.json`.
pub fn write_corpus(root: &Path, entries: &[DatasetEntry]) -> Result<()> {
    for dir in IMAGE_DIRS {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    entries.par_iter().try_for_each(|e| -> Result<()> {
        for (dir, img) in IMAGE_DIRS
            .iter()
            .zip([&e.rgb_before, &e.rgb_after, &e.sem_before, &e.sem_after])
        {
            img.save(image_path(root, dir, &e.id))?;
        }
        Ok(())
    })?;
    let index = to_index(entries);
    let path = root.join("index.json");
    let text = serde_json::to_string_pretty(&index)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn to_index(entries: &[DatasetEntry]) -> IndexFile {
    IndexFile {
        entries: entries
            .iter()
            .map(|e| IndexRecord {
                id: e.id.clone(),
                split: e.split,
                category: e.category.to_string(),
                sentences: e.sentences.clone(),
            })
            .collect(),
    }
}

/// Entry counts by split and change status.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusCounts {
    pub change: SplitCounts,
    pub no_change: SplitCounts,
}

impl CorpusCounts {
    pub fn of(entries: &[DatasetEntry]) -> Self {
        let mut c = Self::default();
        for e in entries {
            if e.is_change() {
                c.change.bump(e.split);
            } else {
                c.no_change.bump(e.split);
            }
        }
        c
    }

    pub fn totals(&self) -> SplitCounts {
        SplitCounts {
            train: self.change.train + self.no_change.train,
            val: self.change.val + self.no_change.val,
            test: self.change.test + self.no_change.test,
        }
    }

    pub fn by_category(entries: &[DatasetEntry]) -> BTreeMap<ChangeCategory, usize> {
        let mut m = BTreeMap::new();
        for e in entries {
            *m.entry(e.category).or_insert(0) += 1;
        }
        m
    }
}

pub fn entries_in(entries: &[DatasetEntry], split: Split) -> Vec<&DatasetEntry> {
    entries.iter().filter(|e| e.split == split).collect()
}
