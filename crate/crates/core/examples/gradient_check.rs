//! Compares reverse-mode gradients of a cross-attention block against central
//! finite differences, for every parameter and both inputs.

use mmodalcc::attention::{cross_attention_block, CrossAttentionConfig, CrossAttentionParams};
use mmodalcc::gradcheck::{check_gradients, GradCheckOptions};
use mmodalcc::params::ParamStore;
use mmodalcc::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut config = CrossAttentionConfig::new(8, 2);
    config.dropout = 0.0;
    let params = CrossAttentionParams::new("ca", config)?;
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    params.init(&mut store, &mut rng);

    let inputs = vec![Tensor::uniform(&[1, 4, 8], 1.0, &mut rng), Tensor::uniform(&[1, 9, 8], 1.0, &mut rng)];
    // a random projection of the output turns it into a scalar loss
    let probe = Tensor::uniform(&[1, 4, 8], 1.0, &mut rng);
    let report = check_gradients(&store, &inputs, &GradCheckOptions::default(), |g, ids| {
        let out = cross_attention_block(g, ids[0], ids[1], &params, "ca")?;
        Ok(g.weighted_sum(out, probe.clone()))
    })?;
    println!("{report:#?}");
    anyhow::ensure!(report.passes(1e-4), "gradient mismatch");
    println!("max relative error {:.2e}", report.max_rel_error);
    Ok(())
}
