//! METEOR with the exact and stem matching stages only; there is no synonym
//! stage, so scores run lower than the reference implementation.

use rust_stemmers::{Algorithm, Stemmer};

use super::{order_free_mean, EvalItem};
use crate::error::{Error, Result};

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;

/// Matched `(hyp_index, ref_index)` pairs, sorted by hypothesis index.
pub fn align(hyp: &[String], reference: &[String], stemmer: &Stemmer) -> Vec<(usize, usize)> {
    let mut hyp_used = vec![false; hyp.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let hyp_stems: Vec<String> = hyp.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let ref_stems: Vec<String> = reference.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    for (h_keys, r_keys) in [(hyp, reference), (&hyp_stems[..], &ref_stems[..])] {
        let mut last: Option<usize> = None;
        for i in 0..hyp.len() {
            if hyp_used[i] {
                last = pairs.iter().find(|&&(h, _)| h == i).map(|&(_, r)| r);
                continue;
            }
            let free = |j: usize| !ref_used[j] && r_keys[j] == h_keys[i];
            // continue the current chunk when possible, else take the first free match
            let next = last.map(|l| l + 1).filter(|&j| j < reference.len() && free(j));
            if let Some(j) = next.or_else(|| (0..reference.len()).find(|&j| free(j))) {
                hyp_used[i] = true;
                ref_used[j] = true;
                pairs.push((i, j));
                last = Some(j);
            } else {
                last = None;
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Number of runs contiguous in both sentences.
pub fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// Score of one hypothesis against one reference from match statistics.
pub fn meteor_from_counts(matches: usize, chunks: usize, hyp_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / hyp_len as f64;
    let r = m / ref_len as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m).powf(METEOR_BETA);
    f * (1.0 - penalty)
}

pub fn meteor_pair(hyp: &[String], reference: &[String], stemmer: &Stemmer) -> f64 {
    let pairs = align(hyp, reference, stemmer);
    meteor_from_counts(pairs.len(), count_chunks(&pairs), hyp.len(), reference.len())
}

pub fn meteor_item(item: &EvalItem, stemmer: &Stemmer) -> f64 {
    item.references
        .iter()
        .map(|r| meteor_pair(&item.hypothesis, r, stemmer))
        .fold(0.0, f64::max)
}

pub fn english_stemmer() -> Stemmer {
    Stemmer::create(Algorithm::English)
}

/// Mean over items of the best per-reference score.
pub fn meteor_simplified(items: &[EvalItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("METEOR needs at least one item".into()));
    }
    let stemmer = english_stemmer();
    Ok(order_free_mean(&items.iter().map(|it| meteor_item(it, &stemmer)).collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tokenize;
    use crate::metrics::tests::{item, random_corpus};

    #[test]
    fn formula_edge_cases() {
        assert_eq!(meteor_simplified(&[item("change", &["change"])]).unwrap(), 0.5);
        let four = meteor_simplified(&[item("a road is built", &["a road is built"])]).unwrap();
        assert!((four - (1.0 - 0.5 / 64.0)).abs() < 1e-12);
        assert_eq!(meteor_simplified(&[item("p q", &["x y z"])]).unwrap(), 0.0);
        assert!(meteor_simplified(&[]).is_err());
    }

    #[test]
    fn stems_match_after_exact() {
        let s = english_stemmer();
        let h = tokenize("buildings appeared");
        let r = tokenize("building appears");
        assert_eq!(align(&h, &r, &s), vec![(0, 0), (1, 1)]);
        // one chunk of two matches: F = 1, penalty 0.5 / 8
        assert!((meteor_pair(&h, &r, &s) - (1.0 - 0.0625)).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_fragmented_alignment() {
        // hyp "a b x c" vs ref "a b c": m = 3, chunks = 2, P = 3/4, R = 1
        let s = english_stemmer();
        let h = tokenize("a b x c");
        let r = tokenize("a b c");
        let pairs = align(&h, &r, &s);
        assert_eq!(pairs, vec![(0, 0), (1, 1), (3, 2)]);
        assert_eq!(count_chunks(&pairs), 2);
        let (p, rc) = (0.75, 1.0);
        let f = p * rc / (0.9 * p + 0.1 * rc);
        let want = f * (1.0 - 0.5 * (2.0f64 / 3.0).powi(3));
        assert!((meteor_pair(&h, &r, &s) - want).abs() < 1e-12);
    }

    #[test]
    fn repeated_words_keep_chunks_together() {
        let s = english_stemmer();
        let h = tokenize("the road and the house");
        let pairs = align(&h, &h, &s);
        assert_eq!(count_chunks(&pairs), 1);
    }

    #[test]
    fn bounded_and_order_invariant() {
        for seed in 0..20 {
            let mut items = random_corpus(seed);
            let a = meteor_simplified(&items).unwrap();
            assert!((0.0..=1.0).contains(&a));
            items.reverse();
            assert_eq!(a, meteor_simplified(&items).unwrap());
        }
    }
}
