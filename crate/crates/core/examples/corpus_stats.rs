//! Builds a synthetic corpus, prints its split counts and caption statistics,
//! then runs the caption linter over it.

use mmodalcc::dataset::fixture::synthetic_corpus;
use mmodalcc::dataset::lint::lint_captions;
use mmodalcc::dataset::stats::compute_stats;
use mmodalcc::dataset::{CorpusCounts, Vocabulary};

fn main() -> anyhow::Result<()> {
    let entries = synthetic_corpus(60, 1);
    let counts = CorpusCounts::of(&entries);
    println!("change    {:?}", counts.change);
    println!("no change {:?}", counts.no_change);

    let stats = compute_stats(&entries);
    println!(
        "{} captions, mean length {:.2} (std {:.2})",
        stats.caption_count, stats.mean_length, stats.std_length
    );
    for (category, n) in &stats.category_hist {
        println!("  {category:28} {n:3}  avg len {:.2}", stats.avg_len_per_category[category]);
    }
    let mut words: Vec<_> = stats.word_freq.iter().collect();
    words.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let top: Vec<String> = words.iter().take(8).map(|(w, n)| format!("{w}:{n}")).collect();
    println!("top words {}", top.join(" "));
    println!("vocabulary {} words", Vocabulary::build(&entries, 1)?.size());

    let findings = lint_captions(&entries);
    println!("{} lint findings", findings.len());
    for f in findings.iter().take(10) {
        println!("  {f}");
    }
    Ok(())
}
