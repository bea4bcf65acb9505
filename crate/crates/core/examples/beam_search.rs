//! Beam search against greedy decoding, first on a hand-built next-token
//! table where greedy misses the best caption, then on a randomly
//! initialized decoder.

use mmodalcc::dataset::{END, START};
use mmodalcc::decoder::{beam_search, greedy, BeamOptions, Decoder, DecoderConfig};
use mmodalcc::params::ParamStore;
use mmodalcc::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const A: usize = 4;
const B: usize = 5;

/// Next-token distribution over `<start> <end> <pad> <unk> a b`.
fn table(prefix: &[usize]) -> Vec<f64> {
    let p: [f64; 6] = match prefix {
        [START] => [1e-6, 0.0, 0.0, 0.0, 0.6, 0.4],
        [START, A] => [1e-6, 0.3, 0.0, 0.0, 0.35, 0.35],
        [START, B] => [1e-6, 0.9, 0.0, 0.0, 0.05, 0.05],
        _ => [1e-6, 1.0, 0.0, 0.0, 0.0, 0.0],
    };
    p.iter().map(|&v| if v > 0.0 { v.ln() } else { -1e9 }).collect()
}

fn main() -> anyhow::Result<()> {
    let step = |prefixes: &[Vec<usize>]| Ok(prefixes.iter().map(|p| table(p)).collect());
    let g = greedy(2, step)?;
    println!("greedy  {:?}  p = {:.3}", g.generated(), g.logprob.exp());
    for k in [1, 2, 3] {
        let h = beam_search(6, &BeamOptions::new(k, 2), step)?;
        println!("beam {k}  {:?}  p = {:.3}", h.generated(), h.logprob.exp());
    }
    println!("(token {A} = a, {B} = b, {END} = <end>)");

    let mut config = DecoderConfig::new(16, 2, 12);
    config.dropout = 0.0;
    let dec = Decoder::new(config)?;
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    dec.init(&mut store, &mut rng);
    store.insert("dec.out.b", Tensor::uniform(&[12], 2.0, &mut rng));
    let x_rgb = Tensor::uniform(&[1, 9, 16], 1.0, &mut rng);
    let x_sem = Tensor::uniform(&[1, 9, 16], 1.0, &mut rng);
    for k in [1, 2, 4, 8] {
        let h = dec.generate(&store, Some(&x_rgb), Some(&x_sem), &BeamOptions::new(k, 6))?;
        println!("decoder beam {k}: {:?}  logprob {:.4}  finished {}", h.generated(), h.logprob, h.finished);
    }
    Ok(())
}
