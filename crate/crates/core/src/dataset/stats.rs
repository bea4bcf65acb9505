//! Corpus statistics and their plot-ready CSV files.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use super::{DatasetEntry, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusStats {
    /// split -> sentence length -> count
    pub sentence_length_hist: BTreeMap<Split, BTreeMap<usize, usize>>,
    /// Same histogram restricted to change entries.
    pub change_length_hist: BTreeMap<Split, BTreeMap<usize, usize>>,
    pub word_freq: BTreeMap<String, usize>,
    pub category_hist: BTreeMap<String, usize>,
    pub avg_len_per_category: BTreeMap<String, f64>,
    /// `(entry id, distinct 4-grams over its five captions)` in corpus order.
    pub unique_4grams_per_image: Vec<(String, usize)>,
    pub caption_count: usize,
    pub mean_length: f64,
    /// Population standard deviation of caption length.
    pub std_length: f64,
}

/// Distinct 4-grams across all captions of one entry.
pub fn unique_4grams(captions: &[Vec<String>]) -> usize {
    captions
        .iter()
        .flat_map(|c| c.windows(4))
        .collect::<HashSet<_>>()
        .len()
}

pub fn compute_stats(entries: &[DatasetEntry]) -> CorpusStats {
    let mut s = CorpusStats::default();
    let mut lengths = Vec::new();
    let mut cat_len_sum: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for e in entries {
        let cat = e.category.to_string();
        *s.category_hist.entry(cat.clone()).or_insert(0) += 1;
        for cap in &e.captions {
            let len = cap.len();
            lengths.push(len as f64);
            *s.sentence_length_hist
                .entry(e.split)
                .or_default()
                .entry(len)
                .or_insert(0) += 1;
            if e.is_change() {
                *s.change_length_hist
                    .entry(e.split)
                    .or_default()
                    .entry(len)
                    .or_insert(0) += 1;
            }
            let acc = cat_len_sum.entry(cat.clone()).or_insert((0, 0));
            acc.0 += len;
            acc.1 += 1;
            for tok in cap {
                *s.word_freq.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        s.unique_4grams_per_image
            .push((e.id.clone(), unique_4grams(&e.captions)));
    }
    s.avg_len_per_category = cat_len_sum
        .into_iter()
        .map(|(k, (sum, n))| (k, sum as f64 / n as f64))
        .collect();
    s.caption_count = lengths.len();
    if !lengths.is_empty() {
        let n = lengths.len() as f64;
        s.mean_length = lengths.iter().sum::<f64>() / n;
        s.std_length = (lengths.iter().map(|l| (l - s.mean_length).powi(2)).sum::<f64>() / n).sqrt();
    }
    s
}

impl CorpusStats {
    /// Writes `sentence_lengths.csv`, `word_freq.csv`, `categories.csv` and
    /// `unique4grams.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("sentence_lengths.csv"))?;
        w.write_record(["split", "length", "count"])?;
        for (split, hist) in &self.sentence_length_hist {
            for (len, count) in hist {
                w.write_record([split.as_str(), &len.to_string(), &count.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        // most frequent first, ties lexicographic
        let mut freq: Vec<(&String, &usize)> = self.word_freq.iter().collect();
        freq.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        let mut w = csv::Writer::from_path(dir.join("word_freq.csv"))?;
        w.write_record(["token", "count"])?;
        for (tok, count) in freq {
            w.write_record([tok.as_str(), &count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("categories.csv"))?;
        w.write_record(["category", "count", "avg_length"])?;
        for (cat, count) in &self.category_hist {
            let avg = self.avg_len_per_category.get(cat).copied().unwrap_or(0.0);
            w.write_record([cat.as_str(), &count.to_string(), &format!("{avg:.4}")])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("unique4grams.csv"))?;
        w.write_record(["id", "unique_4grams"])?;
        for (id, n) in &self.unique_4grams_per_image {
            w.write_record([id.as_str(), &n.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixture;
    use crate::dataset::{ChangeCategory, DatasetEntry};
    use image::RgbImage;

    fn entry_with(sentences: [&str; 5]) -> DatasetEntry {
        let img = || RgbImage::new(4, 4);
        DatasetEntry::new(
            "x",
            [img(), img(), img(), img()],
            sentences.iter().map(|s| s.to_string()).collect(),
            ChangeCategory::NoChange,
            Split::Test,
        )
        .unwrap()
    }

    #[test]
    fn single_length_corpus() {
        let e = entry_with(["a b c d e f g"; 5]);
        let s = compute_stats(&[e]);
        assert_eq!(s.sentence_length_hist[&Split::Test], BTreeMap::from([(7, 5)]));
        assert_eq!(s.mean_length, 7.0);
        assert_eq!(s.std_length, 0.0);
        assert_eq!(s.unique_4grams_per_image[0].1, 4);
    }

    #[test]
    fn fixture_totals_and_4gram_oracle() {
        let entries = fixture::synthetic_corpus(40, 7);
        let s = compute_stats(&entries);
        let hist_total: usize = s.sentence_length_hist.values().flat_map(|h| h.values()).sum();
        assert_eq!(hist_total, 200);
        assert_eq!(s.category_hist.values().sum::<usize>(), 40);
        for (e, (id, n)) in entries.iter().zip(&s.unique_4grams_per_image) {
            assert_eq!(&e.id, id);
            // set-based oracle: collect 4-grams as joined strings
            let mut set = std::collections::BTreeSet::new();
            for cap in &e.captions {
                for i in 0..cap.len().saturating_sub(3) {
                    set.insert(cap[i..i + 4].join(" "));
                }
            }
            assert_eq!(*n, set.len());
        }
    }

    #[test]
    fn csv_output_is_deterministic() {
        let entries = fixture::synthetic_corpus(20, 3);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        compute_stats(&entries).write_csv(d1.path()).unwrap();
        compute_stats(&entries).write_csv(d2.path()).unwrap();
        for f in ["sentence_lengths.csv", "word_freq.csv", "categories.csv", "unique4grams.csv"] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
    }
}
