//! Passes four random feature grids through both enhancement stages and
//! reports output shapes, the shared parameter count per stage and the
//! attention maps recorded along the way.

use mmodalcc::autograd::{Graph, Mode};
use mmodalcc::enhancement::{Enhancement, EnhancementConfig, STAGES};
use mmodalcc::params::ParamStore;
use mmodalcc::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let (dim, heads, n) = (8, 2, 16);
    let enh = Enhancement::new(EnhancementConfig::new(dim, heads))?;
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    enh.init(&mut store, &mut rng);
    for stage in 0..STAGES {
        println!("stage {stage}: {} cross-attention scalars", enh.stage_param_count(&store, stage));
    }

    let mut g = Graph::new(&store, Mode::Eval);
    g.enable_recording();
    // rgb before, rgb after, semantic before, semantic after
    let grids: [_; 4] = std::array::from_fn(|_| g.constant(Tensor::uniform(&[1, n, dim], 1.0, &mut rng)));
    let (x_rgb, x_sem) = enh.enhance(&mut g, grids)?;
    println!("X_rgb {:?}  X_sem {:?}", g.value(x_rgb).shape(), g.value(x_sem).shape());

    for rec in g.take_records() {
        println!("  {:28} {:?}", rec.label, rec.head_mean.shape());
    }
    Ok(())
}
