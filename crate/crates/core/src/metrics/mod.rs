//! Corpus caption metrics and the overall / change / no-change report.

pub mod bleu;
pub mod cider;
pub mod meteor;
mod ngrams;
pub mod rouge;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetEntry, CAPTIONS_PER_ENTRY};
use crate::error::{Error, Result};

pub use bleu::{bleu_all, bleu_n};
pub use cider::cider_d;
pub use meteor::meteor_simplified;
pub use rouge::rouge_l;

/// One generated caption with its references, all tokenized and lowercase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub is_change: bool,
}

/// Mean that does not depend on the order of `values`.
pub fn order_free_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// The aggregate score: the mean of whichever of BLEU-4, METEOR, ROUGE-L,
/// CIDEr-D and SPICE are present.
pub fn s_m_star(bleu4: f64, meteor: f64, rouge: f64, cider: Option<f64>, spice: Option<f64>) -> f64 {
    let vals: Vec<f64> = [Some(bleu4), Some(meteor), Some(rouge), cider, spice].into_iter().flatten().collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Overall,
    Change,
    NoChange,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Overall, Subset::Change, Subset::NoChange];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Overall => "overall",
            Subset::Change => "change",
            Subset::NoChange => "no_change",
        }
    }

    fn contains(self, item: &EvalItem) -> bool {
        match self {
            Subset::Overall => true,
            Subset::Change => item.is_change,
            Subset::NoChange => !item.is_change,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub subset: Subset,
    pub items: usize,
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge: f64,
    /// Absent for the no-change subset.
    pub cider: Option<f64>,
    pub spice: Option<f64>,
    pub s_m: f64,
}

impl MetricRow {
    pub fn compute(subset: Subset, items: &[EvalItem], spice: Option<&SpiceScores>) -> Result<Self> {
        let b = bleu_all(items, 4)?;
        let meteor = meteor_simplified(items)?;
        let rouge = rouge_l(items)?;
        let cider = if subset == Subset::NoChange { None } else { Some(cider_d(items)?) };
        let spice = spice.map(|s| order_free_mean(&items.iter().map(|it| s[&it.id]).collect::<Vec<_>>()));
        Ok(Self {
            subset,
            items: items.len(),
            bleu: [b[0], b[1], b[2], b[3]],
            meteor,
            rouge,
            cider,
            spice,
            s_m: s_m_star(b[3], meteor, rouge, cider, spice),
        })
    }
}

/// Externally computed SPICE score per entry id.
pub type SpiceScores = BTreeMap<String, f64>;

/// Reads SPICE scores from a JSON object `{id: score}` or a CSV with
/// `id,spice` columns (chosen by the `.json` extension).
pub fn load_spice(path: &Path) -> Result<SpiceScores> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(serde_json::from_str(&text)?);
    }
    #[derive(Deserialize)]
    struct Row {
        id: String,
        spice: f64,
    }
    let mut out = SpiceScores::new();
    for row in csv::Reader::from_reader(text.as_bytes()).deserialize() {
        let row: Row = row?;
        out.insert(row.id, row.spice);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Overall, then change and no-change when those subsets are non-empty.
    pub rows: Vec<MetricRow>,
    /// False when no SPICE file was given, so S_m* averages fewer metrics.
    pub spice_supplied: bool,
    pub notes: Vec<String>,
}

pub const METEOR_NOTE: &str = "METEOR uses exact and stem matching only (no synonym stage)";
pub const SPICE_NOTE: &str = "SPICE not supplied; S_m* averages the remaining metrics";
pub const NO_CHANGE_NOTE: &str = "CIDEr-D is omitted for the no-change subset";

pub const REPORT_COLUMNS: [&str; 10] =
    ["subset", "BLEU1", "BLEU2", "BLEU3", "BLEU4", "METEOR", "ROUGE", "CIDEr", "SPICE", "Sm"];

impl MetricReport {
    pub fn row(&self, subset: Subset) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.subset == subset)
    }

    pub fn overall(&self) -> &MetricRow {
        &self.rows[0]
    }

    /// CSV in the column order of the results tables; notes become `#` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        s.push_str(&REPORT_COLUMNS.join(","));
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.subset.as_str(),
                r.bleu[0],
                r.bleu[1],
                r.bleu[2],
                r.bleu[3],
                r.meteor,
                r.rouge,
                opt(r.cider),
                opt(r.spice),
                r.s_m
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

/// Pairs generated captions with dataset references. Every entry needs a
/// hypothesis; the error lists the ids that have none.
pub fn build_items(entries: &[&DatasetEntry], hypotheses: &BTreeMap<String, Vec<String>>) -> Result<Vec<EvalItem>> {
    let missing: Vec<String> = entries
        .iter()
        .filter(|e| !hypotheses.contains_key(&e.id))
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingHypotheses(missing));
    }
    Ok(entries
        .iter()
        .map(|e| EvalItem {
            id: e.id.clone(),
            hypothesis: hypotheses[&e.id].iter().map(|t| t.to_lowercase()).collect(),
            references: e.captions.clone(),
            is_change: e.is_change(),
        })
        .collect())
}

/// The full report over `items`, one row per non-empty subset.
pub fn evaluate(items: &[EvalItem], spice: Option<&SpiceScores>) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    if let Some(it) = items.iter().find(|it| it.references.len() != CAPTIONS_PER_ENTRY) {
        return Err(Error::Schema {
            id: it.id.clone(),
            reason: format!("expected {CAPTIONS_PER_ENTRY} references, found {}", it.references.len()),
        });
    }
    if let Some(s) = spice {
        let missing: Vec<String> = items.iter().filter(|it| !s.contains_key(&it.id)).map(|it| it.id.clone()).collect();
        if !missing.is_empty() {
            return Err(Error::InvalidArgument(format!("SPICE scores missing for ids: {missing:?}")));
        }
    }
    let mut rows = Vec::new();
    for subset in Subset::ALL {
        let part: Vec<EvalItem> = items.iter().filter(|it| subset.contains(it)).cloned().collect();
        if !part.is_empty() {
            rows.push(MetricRow::compute(subset, &part, spice)?);
        }
    }
    let mut notes = vec![METEOR_NOTE.to_string(), NO_CHANGE_NOTE.to_string()];
    if spice.is_none() {
        notes.push(SPICE_NOTE.to_string());
    }
    Ok(MetricReport {
        rows,
        spice_supplied: spice.is_some(),
        notes,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::tokenize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn item(hyp: &str, refs: &[&str]) -> EvalItem {
        EvalItem {
            id: String::new(),
            hypothesis: tokenize(hyp),
            references: refs.iter().map(|r| tokenize(r)).collect(),
            is_change: true,
        }
    }

    fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<String> {
        const WORDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
        let len = rng.gen_range(min..=max);
        (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
    }

    /// Small corpora over a six-word alphabet so n-grams collide often.
    pub(crate) fn random_corpus(seed: u64) -> Vec<EvalItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=6);
        (0..n)
            .map(|i| {
                let refs = rng.gen_range(1..=5);
                EvalItem {
                    id: format!("r{i}"),
                    hypothesis: sentence(&mut rng, 1, 9),
                    references: (0..refs).map(|_| sentence(&mut rng, 1, 9)).collect(),
                    is_change: rng.gen_bool(0.6),
                }
            })
            .collect()
    }

    fn five(id: &str, hyp: &str, refs: &str, change: bool) -> EvalItem {
        EvalItem {
            id: id.into(),
            hypothesis: tokenize(hyp),
            references: vec![tokenize(refs); 5],
            is_change: change,
        }
    }

    #[test]
    fn published_aggregates_reproduce() {
        let s = s_m_star(0.386, 0.280, 0.584, Some(0.933), Some(0.249));
        assert!((s - 0.4864).abs() < 1e-12);
        assert!((s - 0.487).abs() <= 1e-3);
        let nc = s_m_star(0.940, 0.735, 0.972, None, Some(0.413));
        assert!((nc - 0.765).abs() <= 1e-3);
        assert_eq!(s_m_star(0.0, 0.0, 0.0, Some(0.0), Some(0.0)), 0.0);
        assert_eq!(s_m_star(1.0, 1.0, 1.0, Some(1.0), Some(1.0)), 1.0);
    }

    fn corpus() -> Vec<EvalItem> {
        vec![
            five("a", "a building appears in the top left", "a building appears in the top left", true),
            five("b", "the trees are removed", "the trees are removed", true),
            five("c", "there is no change in the scene", "there is no change in the scene", false),
            five("d", "the two images are the same", "the two images are the same", false),
        ]
    }

    #[test]
    fn report_rows_and_no_change_omits_cider() {
        let items = corpus();
        let rep = evaluate(&items, None).unwrap();
        assert_eq!(rep.rows.len(), 3);
        assert!(!rep.spice_supplied);
        let nc = rep.row(Subset::NoChange).unwrap();
        assert_eq!(nc.cider, None);
        assert_eq!(nc.bleu, [1.0; 4]);
        let ch = rep.row(Subset::Change).unwrap();
        assert!(ch.cider.is_some());
        // each row equals the composition of the per-metric functions on its subset
        let part: Vec<EvalItem> = items.iter().filter(|i| i.is_change).cloned().collect();
        assert_eq!(ch.cider, Some(cider_d(&part).unwrap()));
        assert_eq!(ch.meteor, meteor_simplified(&part).unwrap());
        assert_eq!(ch.s_m, s_m_star(ch.bleu[3], ch.meteor, ch.rouge, ch.cider, None));
        // two-word captions have no 4-grams, so unsmoothed BLEU-4 is zero
        let short = vec![five("e", "no change", "no change", false); 2];
        assert_eq!(evaluate(&short, None).unwrap().overall().bleu[3], 0.0);
        let csv = rep.to_csv();
        assert!(csv.contains("\nno_change,1,1,1,1,"));
        assert!(csv.lines().any(|l| l.starts_with("subset,BLEU1,BLEU2,BLEU3,BLEU4,METEOR,ROUGE,CIDEr,SPICE,Sm")));
    }

    #[test]
    fn spice_ingestion_and_missing_ids() {
        let items = corpus();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spice.csv");
        std::fs::write(&p, "id,spice\na,0.5\nb,0.25\nc,1\nd,1\n").unwrap();
        let spice = load_spice(&p).unwrap();
        let rep = evaluate(&items, Some(&spice)).unwrap();
        assert_eq!(rep.row(Subset::Change).unwrap().spice, Some(0.375));
        assert_eq!(rep.overall().spice, Some(0.6875));
        let j = dir.path().join("spice.json");
        std::fs::write(&j, r#"{"a": 0.5}"#).unwrap();
        assert!(evaluate(&items, Some(&load_spice(&j).unwrap())).is_err());
    }

    #[test]
    fn missing_hypotheses_are_listed() {
        let entries = crate::dataset::fixture::overfit_fixture();
        let refs: Vec<&DatasetEntry> = entries.iter().collect();
        let mut hyps = BTreeMap::new();
        hyps.insert("fit0".to_string(), tokenize("no change"));
        match build_items(&refs, &hyps) {
            Err(Error::MissingHypotheses(ids)) => assert_eq!(ids.len(), 7),
            other => panic!("expected missing ids, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(seed in 0u64..200, rot in 0usize..6) {
            let items = random_corpus(seed);
            let mut shuffled = items.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            for n in 1..=4 {
                prop_assert_eq!(bleu_n(&items, n).unwrap(), bleu_n(&shuffled, n).unwrap());
            }
            prop_assert_eq!(rouge_l(&items).unwrap(), rouge_l(&shuffled).unwrap());
            prop_assert_eq!(meteor_simplified(&items).unwrap(), meteor_simplified(&shuffled).unwrap());
            prop_assert_eq!(cider_d(&items).unwrap(), cider_d(&shuffled).unwrap());
        }
    }
}
