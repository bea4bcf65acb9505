use super::{order_free_mean, EvalItem};
use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one hypothesis against one reference.
pub fn rouge_l_pair(hyp: &[String], reference: &[String], beta: f64) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l_item(item: &EvalItem) -> f64 {
    item.references
        .iter()
        .map(|r| rouge_l_pair(&item.hypothesis, r, ROUGE_BETA))
        .fold(0.0, f64::max)
}

/// Mean over items of the best per-reference ROUGE-L.
pub fn rouge_l(items: &[EvalItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("ROUGE-L needs at least one item".into()));
    }
    Ok(order_free_mean(&items.iter().map(rouge_l_item).collect::<Vec<_>>()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::tokenize;
    use crate::metrics::tests::{item, random_corpus};
    use proptest::prelude::*;

    /// Exhaustive LCS: the longest subsequence of `a` (by bitmask) that is
    /// also a subsequence of `b`.
    fn oracle_lcs(a: &[String], b: &[String]) -> usize {
        assert!(a.len() <= 16);
        let is_subseq = |s: &[&String]| {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == *x))
        };
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let s: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
                is_subseq(&s).then_some(s.len())
            })
            .max()
            .unwrap_or(0)
    }

    pub(crate) fn oracle_rouge(items: &[EvalItem]) -> f64 {
        let mut total = 0.0;
        for it in items {
            let mut best: f64 = 0.0;
            for r in &it.references {
                let l = oracle_lcs(&it.hypothesis, r) as f64;
                if l > 0.0 {
                    let p = l / it.hypothesis.len() as f64;
                    let rc = l / r.len() as f64;
                    best = best.max((1.0 + 1.44) * p * rc / (rc + 1.44 * p));
                }
            }
            total += best;
        }
        total / items.len() as f64
    }

    #[test]
    fn worked_examples() {
        let it = item("a b c d", &["a c d e"]);
        assert_eq!(lcs_len(&it.hypothesis, &it.references[0]), 3);
        assert!((rouge_l(&[it]).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&[item("x y", &["x y"])]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[item("x y", &["p q"])]).unwrap(), 0.0);
        assert_eq!(rouge_l(&[item("", &["p q"])]).unwrap(), 0.0);
        assert!(rouge_l(&[]).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_corpora() {
        for seed in 0..20 {
            let items = random_corpus(seed);
            let a = rouge_l(&items).unwrap();
            let b = oracle_rouge(&items);
            assert!((a - b).abs() < 1e-9, "seed {seed}: {a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn identity_scores_one_for_every_beta(beta in 0.1f64..5.0, words in prop::collection::vec("[a-d]", 1..8)) {
            let s = tokenize(&words.join(" "));
            prop_assert!((rouge_l_pair(&s, &s, beta) - 1.0).abs() < 1e-12);
        }
    }
}
