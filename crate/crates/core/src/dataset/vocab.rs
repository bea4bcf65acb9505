use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::DatasetEntry;
use crate::error::{Error, Result};

pub const START: usize = 0;
pub const END: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<start>", "<end>", "<pad>", "<unk>"];

/// Token <-> id mapping. Ids `0..4` are the specials `<start>`, `<end>`,
/// `<pad>`, `<unk>`; words follow in descending frequency with ties broken
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Vocabulary::from_words(r.words)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            words: v.id_to_token[SPECIALS.len()..].to_vec(),
        }
    }
}

impl Vocabulary {
    /// Builds from words already in id order (specials are prepended).
    pub fn from_words(words: Vec<String>) -> Self {
        let id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { id_to_token, token_to_id }
    }

    /// Counts tokens over all captions; words seen fewer than `min_count`
    /// times are left out (and so encode to `<unk>`).
    pub fn build(entries: &[DatasetEntry], min_count: usize) -> Result<Self> {
        Self::from_captions(entries.iter().flat_map(|e| e.captions.iter()), min_count)
    }

    pub fn from_captions<'a>(
        captions: impl IntoIterator<Item = &'a Vec<String>>,
        min_count: usize,
    ) -> Result<Self> {
        if min_count < 1 {
            return Err(Error::InvalidArgument("min_count must be at least 1".into()));
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        let mut n_captions = 0;
        for cap in captions {
            n_captions += 1;
            for tok in cap {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        if n_captions == 0 || freq.is_empty() {
            return Err(Error::InvalidArgument("cannot build a vocabulary from no captions".into()));
        }
        let mut words: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_count).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Ok(Self::from_words(words.into_iter().map(|(w, _)| w.to_string()).collect()))
    }

    /// Number of words, excluding the four specials.
    pub fn size(&self) -> usize {
        self.id_to_token.len() - SPECIALS.len()
    }

    /// Number of output classes including specials.
    pub fn len_with_specials(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn words(&self) -> &[String] {
        &self.id_to_token[SPECIALS.len()..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Words of a generated sequence: drops `<start>`/`<pad>` and stops at `<end>`.
    pub fn decode_caption(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .take_while(|&i| i != END)
            .filter(|&i| i != START && i != PAD)
            .map(|i| self.token(i).to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tokenize;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn caps(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| tokenize(l)).collect()
    }

    #[test]
    fn no_change_only_corpus() {
        let c = caps(&["no change"; 5]);
        let v = Vocabulary::from_captions(&c, 1).unwrap();
        assert_eq!(v.size(), 2);
        assert!(v.contains("no") && v.contains("change"));
        assert_eq!(v.words(), ["change", "no"]); // equal counts, lexicographic
    }

    #[test]
    fn ordering_by_frequency_then_lexicographic() {
        let c = caps(&["b a a", "c b a", "d"]);
        let v = Vocabulary::from_captions(&c, 1).unwrap();
        assert_eq!(v.words(), ["a", "b", "c", "d"]);
        assert_eq!(v.id("a"), 4);
        let v2 = Vocabulary::from_captions(&c, 2).unwrap();
        assert_eq!(v2.words(), ["a", "b"]);
        assert_eq!(v2.id("d"), UNK);
    }

    #[test]
    fn errors() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(Vocabulary::from_captions(&empty, 1).is_err());
        assert!(Vocabulary::from_captions(&caps(&["a"]), 0).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::from_captions(&caps(&["x y y z"]), 1).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&s).unwrap(), v);
    }

    #[test]
    fn decode_caption_stops_at_end() {
        let v = Vocabulary::from_captions(&caps(&["no change"]), 1).unwrap();
        let ids = [START, v.id("no"), v.id("change"), END, v.id("no")];
        assert_eq!(v.decode_caption(&ids), ["no", "change"]);
    }

    proptest! {
        #[test]
        fn size_equals_brute_force_distinct_count(
            corpus in prop::collection::vec(prop::collection::vec(0u8..12, 1..8), 50),
            min_count in 1usize..4,
        ) {
            let captions: Vec<Vec<String>> = corpus
                .iter()
                .map(|c| c.iter().map(|t| format!("w{t}")).collect())
                .collect();
            let v = Vocabulary::from_captions(&captions, min_count).unwrap();
            let distinct: HashSet<&String> = captions.iter().flatten().collect();
            let expected = distinct
                .into_iter()
                .filter(|w| captions.iter().flatten().filter(|x| x == w).count() >= min_count)
                .count();
            prop_assert_eq!(v.size(), expected);
            for cap in &captions {
                let ids = v.encode(cap);
                for (id, tok) in ids.iter().zip(cap) {
                    if v.contains(tok) {
                        prop_assert_eq!(v.token(*id), tok.as_str());
                    } else {
                        prop_assert_eq!(*id, UNK);
                    }
                }
            }
        }
    }
}
