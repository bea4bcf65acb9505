//! Runs one cross-attention block with queries from a 2x2 grid and keys from
//! a 3x3 grid, and prints the head-averaged attention weights.

use mmodalcc::attention::{cross_attention_block, CrossAttentionConfig, CrossAttentionParams};
use mmodalcc::autograd::{Graph, Mode};
use mmodalcc::params::ParamStore;
use mmodalcc::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let (dim, heads) = (8, 2);
    let params = CrossAttentionParams::new("ca", CrossAttentionConfig::new(dim, heads))?;
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    params.init(&mut store, &mut rng);
    println!("{} parameters", CrossAttentionParams::param_count(dim));

    let source = Tensor::uniform(&[1, 4, dim], 1.0, &mut rng);
    let target = Tensor::uniform(&[1, 9, dim], 1.0, &mut rng);
    let mut g = Graph::new(&store, Mode::Eval);
    g.enable_recording();
    let s = g.constant(source);
    let t = g.constant(target);
    let out = cross_attention_block(&mut g, s, t, &params, "demo")?;
    println!("output shape {:?}", g.value(out).shape());

    for rec in g.take_records() {
        println!("{}: {} heads", rec.label, rec.heads.len());
        for q in 0..rec.head_mean.rows() {
            let row = rec.head_mean.row(q);
            let cells: Vec<String> = row.iter().map(|w| format!("{w:.3}")).collect();
            println!("  query {q}: {}  (sum {:.6})", cells.join(" "), row.iter().sum::<f64>());
        }
    }
    Ok(())
}
