use std::collections::HashMap;

use super::ngrams::ngram_counts;
use super::EvalItem;
use crate::error::{Error, Result};

/// Clipped n-gram matches and hypothesis n-gram totals for orders `1..=max_n`,
/// plus the hypothesis length and its closest reference length.
#[derive(Debug, Clone, PartialEq)]
struct ItemStats {
    matches: Vec<usize>,
    totals: Vec<usize>,
    hyp_len: usize,
    ref_len: usize,
}

/// Reference length closest to `hyp_len`; the shorter one wins ties.
pub fn closest_ref_len(hyp_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

fn item_stats(item: &EvalItem, max_n: usize) -> ItemStats {
    let mut matches = Vec::with_capacity(max_n);
    let mut totals = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let hyp = ngram_counts(&item.hypothesis, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &item.references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        matches.push(hyp.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum());
        totals.push(item.hypothesis.len().saturating_sub(n - 1));
    }
    ItemStats {
        matches,
        totals,
        hyp_len: item.hypothesis.len(),
        ref_len: closest_ref_len(item.hypothesis.len(), &item.references),
    }
}

/// Corpus BLEU-1 through BLEU-`max_n`, no smoothing.
pub fn bleu_all(items: &[EvalItem], max_n: usize) -> Result<Vec<f64>> {
    if max_n < 1 {
        return Err(Error::InvalidArgument("BLEU order must be at least 1".into()));
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("BLEU needs at least one item".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for s in items.iter().map(|it| item_stats(it, max_n)) {
        for k in 0..max_n {
            matches[k] += s.matches[k];
            totals[k] += s.totals[k];
        }
        c += s.hyp_len;
        r += s.ref_len;
    }
    if c == 0 {
        return Ok(vec![0.0; max_n]);
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(max_n);
    for k in 0..max_n {
        if matches[k] == 0 || log_sum == f64::NEG_INFINITY {
            log_sum = f64::NEG_INFINITY;
            out.push(0.0);
            continue;
        }
        log_sum += (matches[k] as f64 / totals[k] as f64).ln();
        out.push(bp * (log_sum / (k + 1) as f64).exp());
    }
    Ok(out)
}

/// Corpus BLEU-`n`.
pub fn bleu_n(items: &[EvalItem], n: usize) -> Result<f64> {
    Ok(*bleu_all(items, n)?.last().expect("n >= 1"))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::metrics::tests::{item, random_corpus};
    use proptest::prelude::*;

    /// Brute force: every distinct n-gram is located by scanning all windows.
    pub(crate) fn oracle_bleu(items: &[EvalItem], n: usize) -> f64 {
        let count = |toks: &[String], g: &[String]| toks.windows(g.len()).filter(|w| *w == g).count();
        let mut log_p = 0.0;
        let mut c = 0;
        let mut r = 0;
        for it in items {
            c += it.hypothesis.len();
            let h = it.hypothesis.len();
            let dmin = it.references.iter().map(|rf| rf.len().abs_diff(h)).min().unwrap();
            let best = it.references.iter().map(Vec::len).filter(|l| l.abs_diff(h) == dmin).min().unwrap();
            r += best;
        }
        for k in 1..=n {
            let mut num = 0;
            let mut den = 0;
            for it in items {
                let h = &it.hypothesis;
                if h.len() < k {
                    continue;
                }
                den += h.len() - k + 1;
                let mut seen: Vec<&[String]> = Vec::new();
                for g in h.windows(k) {
                    if seen.contains(&g) {
                        continue;
                    }
                    seen.push(g);
                    let m = it.references.iter().map(|rf| count(rf, g)).max().unwrap_or(0);
                    num += count(h, g).min(m);
                }
            }
            if num == 0 {
                return 0.0;
            }
            log_p += (num as f64 / den as f64).ln();
        }
        let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
        bp * (log_p / n as f64).exp()
    }

    #[test]
    fn identical_is_one_and_disjoint_is_zero() {
        let items = vec![
            item("a b c d e", &["a b c d e", "x y"]),
            item("the house is gone", &["the house is gone"]),
        ];
        for n in 1..=4 {
            assert_eq!(bleu_n(&items, n).unwrap(), 1.0);
        }
        let items = vec![item("p q r", &["a b c"])];
        assert_eq!(bleu_n(&items, 1).unwrap(), 0.0);
        assert!(bleu_n(&items, 0).is_err());
        assert!(bleu_n(&[], 1).is_err());
    }

    #[test]
    fn hand_computed_brevity_and_clipping() {
        // hyp "the the the" vs ref "the cat sat on": p1 = 1/3, c = 3 < r = 4
        let items = vec![item("the the the", &["the cat sat on"])];
        let want = (1.0f64 - 4.0 / 3.0).exp() / 3.0;
        assert!((bleu_n(&items, 1).unwrap() - want).abs() < 1e-12);
        assert_eq!(closest_ref_len(5, &[vec!["a".into(); 4], vec!["a".into(); 6]]), 4);
    }

    #[test]
    fn matches_brute_force_on_random_corpora() {
        for seed in 0..20 {
            let items = random_corpus(seed);
            for n in 1..=4 {
                let a = bleu_n(&items, n).unwrap();
                let b = oracle_bleu(&items, n);
                assert!((a - b).abs() < 1e-9, "seed {seed} n {n}: {a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn duplicate_reference_is_a_no_op(seed in 0u64..500) {
            let items = random_corpus(seed);
            let dup: Vec<EvalItem> = items.iter().map(|it| {
                let mut it = it.clone();
                it.references.push(it.references[0].clone());
                it
            }).collect();
            for n in 1..=4 {
                prop_assert_eq!(bleu_n(&items, n).unwrap(), bleu_n(&dup, n).unwrap());
            }
        }
    }
}
