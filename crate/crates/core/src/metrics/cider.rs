use std::collections::{BTreeMap, HashMap};

use super::ngrams::{ngram_counts, NgramCounts};
use super::{order_free_mean, EvalItem};
use crate::error::{Error, Result};

pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SCALE: f64 = 10.0;

struct Doc<'a> {
    /// One count table per order.
    counts: Vec<NgramCounts<'a>>,
    len: usize,
}

impl<'a> Doc<'a> {
    fn new(tokens: &'a [String]) -> Self {
        Self {
            counts: (1..=CIDER_MAX_N).map(|n| ngram_counts(tokens, n)).collect(),
            len: tokens.len(),
        }
    }
}

/// tf-idf vector of one order plus its Euclidean norm. Ordered so that
/// every sum runs in the same sequence.
fn tfidf<'a>(counts: &NgramCounts<'a>, df: &HashMap<&'a [String], usize>, log_n: f64) -> (BTreeMap<&'a [String], f64>, f64) {
    let vec: BTreeMap<&[String], f64> = counts
        .iter()
        .map(|(&g, &c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 * (log_n - d.ln()))
        })
        .collect();
    let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
    (vec, norm)
}

/// Per-item CIDEr-D scores. Document frequency counts each item's reference
/// set once, over the items given.
pub fn cider_d_scores(items: &[EvalItem]) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("CIDEr-D needs at least one item".into()));
    }
    let refs: Vec<Vec<Doc>> = items.iter().map(|it| it.references.iter().map(|r| Doc::new(r)).collect()).collect();
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for set in &refs {
        let mut seen: Vec<&[String]> = set.iter().flat_map(|d| d.counts.iter().flat_map(|c| c.keys().copied())).collect();
        seen.sort_unstable();
        seen.dedup();
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (items.len() as f64).ln();
    Ok(items
        .iter()
        .zip(&refs)
        .map(|(it, set)| {
            let hyp = Doc::new(&it.hypothesis);
            let mut per_order = [0.0; CIDER_MAX_N];
            for (n, acc) in per_order.iter_mut().enumerate() {
                let (hv, hn) = tfidf(&hyp.counts[n], &df, log_n);
                for r in set {
                    let (rv, rn) = tfidf(&r.counts[n], &df, log_n);
                    let mut dot = 0.0;
                    for (g, &hw) in &hv {
                        if let Some(&rw) = rv.get(g) {
                            dot += hw.min(rw) * rw;
                        }
                    }
                    if hn != 0.0 && rn != 0.0 {
                        dot /= hn * rn;
                    }
                    let delta = hyp.len as f64 - r.len as f64;
                    *acc += dot * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                }
            }
            per_order.iter().sum::<f64>() / CIDER_MAX_N as f64 / set.len() as f64 * CIDER_SCALE
        })
        .collect())
}

/// Corpus CIDEr-D: the mean of the per-item scores. A single-item corpus
/// has every idf equal to zero and scores 0.
pub fn cider_d(items: &[EvalItem]) -> Result<f64> {
    Ok(order_free_mean(&cider_d_scores(items)?))
}
