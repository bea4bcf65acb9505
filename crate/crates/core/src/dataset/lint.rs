//! Caption guideline checks. The linter only reports; it never edits.

use std::collections::HashSet;
use std::fmt;

use super::{DatasetEntry, Vocabulary};

/// Distinct words allowed before the corpus is flagged.
pub const MAX_VOCABULARY: usize = 2000;

/// Directional words with their standardized replacement.
pub const DIRECTION_REPLACEMENTS: [(&str, &str); 8] = [
    ("up", "top"),
    ("upper", "top"),
    ("above", "top"),
    ("below", "bottom"),
    ("down", "bottom"),
    ("lower", "bottom"),
    ("leftside", "left"),
    ("rightside", "right"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LintRule {
    NonstandardDirection,
    Repeated4gram,
    VocabularySize,
}

impl LintRule {
    pub fn as_str(self) -> &'static str {
        match self {
            LintRule::NonstandardDirection => "nonstandard_direction",
            LintRule::Repeated4gram => "repeated_4gram",
            LintRule::VocabularySize => "vocabulary_size",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LintFinding {
    /// Entry id, or `<corpus>` for corpus-wide findings.
    pub entry_id: String,
    pub rule: LintRule,
    pub detail: String,
}

impl fmt::Display for LintFinding {
    /// `entry_id<TAB>rule<TAB>detail`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.entry_id, self.rule.as_str(), self.detail)
    }
}

pub fn suggested_direction(token: &str) -> Option<&'static str> {
    DIRECTION_REPLACEMENTS
        .iter()
        .find(|(from, _)| *from == token)
        .map(|(_, to)| *to)
}

/// 4-grams that occur more than once in one caption, in first-repeat order.
pub fn repeated_4grams(tokens: &[String]) -> Vec<Vec<String>> {
    let mut seen = HashSet::new();
    let mut reported = HashSet::new();
    let mut out = Vec::new();
    for w in tokens.windows(4) {
        if !seen.insert(w) && reported.insert(w) {
            out.push(w.to_vec());
        }
    }
    out
}

pub fn lint_captions(entries: &[DatasetEntry]) -> Vec<LintFinding> {
    let mut findings = Vec::new();
    for e in entries {
        for (ci, cap) in e.captions.iter().enumerate() {
            for tok in cap {
                if let Some(rep) = suggested_direction(tok) {
                    findings.push(LintFinding {
                        entry_id: e.id.clone(),
                        rule: LintRule::NonstandardDirection,
                        detail: format!("caption {ci}: \"{tok}\"->\"{rep}\""),
                    });
                }
            }
            for gram in repeated_4grams(cap) {
                findings.push(LintFinding {
                    entry_id: e.id.clone(),
                    rule: LintRule::Repeated4gram,
                    detail: format!("caption {ci}: \"{}\"", gram.join(" ")),
                });
            }
        }
    }
    if let Ok(vocab) = Vocabulary::build(entries, 1) {
        if vocab.size() >= MAX_VOCABULARY {
            findings.push(LintFinding {
                entry_id: "<corpus>".into(),
                rule: LintRule::VocabularySize,
                detail: format!("{} distinct words (limit {MAX_VOCABULARY})", vocab.size()),
            });
        }
    }
    findings
}
