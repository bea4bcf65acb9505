//! Applies each augmentation to one entry and shows how geometric transforms
//! rewrite direction words, then augments a whole training split.

use mmodalcc::augment::{augment_corpus, augment_entry, augmented_counts, AugmentKind, AugmentSpec};
use mmodalcc::dataset::fixture::synthetic_corpus;
use mmodalcc::dataset::CorpusCounts;

fn main() -> anyhow::Result<()> {
    let entries = synthetic_corpus(40, 2);
    let entry = entries
        .iter()
        .find(|e| e.sentences.iter().any(|s| s.contains("left") || s.contains("top")))
        .unwrap_or(&entries[0]);
    println!("{}: {}", entry.id, entry.sentences[0]);
    for kind in AugmentKind::ALL {
        let out = augment_entry(entry, &AugmentSpec::new(kind))?;
        let changed = out.rgb_after.as_raw() != entry.rgb_after.as_raw();
        println!("  {:10} pixels changed: {changed:5}  {}", kind.as_str(), out.sentences[0]);
    }

    let augmented = augment_corpus(&entries, 7)?;
    let before = CorpusCounts::of(&entries);
    let after = CorpusCounts::of(&augmented);
    println!("change    {:?} -> {:?}", before.change, after.change);
    println!("no change {:?} -> {:?}", before.no_change, after.no_change);
    assert_eq!(after.change, augmented_counts(before.change));
    Ok(())
}
