//! Trains the tiny model on the overfit fixture, captions one pair with
//! attention recording on and writes every map plus its overlay PNG.
//!
//! Usage: `cargo run --example attention_maps [OUT_DIR]`

use mmodalcc::attn_export::{collect_maps, write_maps, Aggregation, OverlayImages};
use mmodalcc::dataset::fixture::overfit_fixture;
use mmodalcc::dataset::{entries_in, Split};
use mmodalcc::decoder::BeamOptions;
use mmodalcc::model::ImageBatch;
use mmodalcc::training::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let out = std::env::args_os()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("mmodalcc_attention_maps"));
    let entries = overfit_fixture();
    let mut trainer = Trainer::new(TrainConfig::tiny(), &entries)?;
    let train = entries_in(&entries, Split::Train);
    for _ in 0..150 {
        trainer.train_epoch(&train)?;
    }

    let entry = *train.iter().find(|e| e.is_change()).expect("fixture has change pairs");
    let model = &trainer.model;
    let batch = ImageBatch::from_entries(&[entry], model.config.encoder.semantic_input)?;
    let trace = model.caption_with_attention(&trainer.store, &batch, &BeamOptions::new(2, model.config.t_max))?;
    let caption = trainer.vocab.decode_caption(trace.hypothesis.generated()).join(" ");
    println!("reference: {}", entry.sentences[0]);
    println!("generated: {caption}");

    let side = model.config.encoder.backbone.grid_side;
    let maps = collect_maps(&trace.records, &trace.hypothesis.tokens, &trainer.vocab, side)?;
    write_maps(&out, &maps, OverlayImages::of(entry))?;
    for m in maps.iter().filter(|m| m.meta.aggregation == Aggregation::HeadMean) {
        let token = m.meta.token.as_deref().unwrap_or("");
        println!("  {:40} {:?} {token}", m.meta.name, m.meta.shape);
    }
    println!("{} maps written to {}", maps.len(), out.display());
    Ok(())
}
