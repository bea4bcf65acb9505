//! Trains the tiny model on the 8-pair synthetic fixture until it memorizes
//! every caption, then prints the greedy decodes.

use std::time::Instant;

use mmodalcc::dataset::fixture::overfit_fixture;
use mmodalcc::dataset::{entries_in, Split};
use mmodalcc::decoder::BeamOptions;
use mmodalcc::training::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let entries = overfit_fixture();
    let config = TrainConfig::tiny();
    let max_epochs = config.max_epochs;
    let mut trainer = Trainer::new(config, &entries)?;
    let train = entries_in(&entries, Split::Train);
    let start = Instant::now();
    let greedy = BeamOptions::new(1, trainer.model.config.t_max);
    for epoch in 1..=max_epochs {
        let loss = trainer.train_epoch(&train)?;
        if epoch % 10 == 0 || loss < 0.01 {
            let caps = trainer.captions(&train, &greedy)?;
            let exact = train.iter().filter(|e| caps[&e.id] == e.captions[0]).count();
            println!("epoch {epoch:4}  loss {loss:.5}  exact {exact}/{}  {:.1}s", train.len(), start.elapsed().as_secs_f64());
            if loss < 0.01 && exact == train.len() {
                for e in &train {
                    println!("  {:6} {}", e.id, caps[&e.id].join(" "));
                }
                return Ok(());
            }
        }
    }
    anyhow::bail!("did not memorize the fixture within {max_epochs} epochs")
}
