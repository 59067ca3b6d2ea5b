//! Combines a query vector with per-frame features by sum, concatenation
//! and elementwise product, and shows the interactive and mutual attention
//! mixes used by the two-stream model.

use ndarray::{array, Array2};
use qvsum::fusion::{fuse_simple, interactive_attention, mutual_attention, ChannelMix, FuseMode};
use qvsum::rng::rng;
use qvsum_autograd::{Graph, ParamStore};

fn main() -> qvsum::Result<()> {
    let mut store = ParamStore::new();
    let mix = ChannelMix::new(&mut store, &mut rng(1), "mix", 3, 2)?;
    let mut g = Graph::with_params(&store);
    let q = g.input(array![[1.0, 0.0, -1.0]]);
    let frames = g.input(Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64 * 0.5));

    for mode in [FuseMode::Sum, FuseMode::Concat, FuseMode::Mul] {
        let f = fuse_simple(&mut g, q, frames, mode)?;
        println!("{mode:?}:\n{}", g.value(f));
    }

    let z_va = g.input(array![[0.2, 0.4, 0.6]]);
    let z_as = g.input(array![[1.0, 1.0, 0.5]]);
    let inter = interactive_attention(&mut g, q, z_va, &mix)?;
    let mutual = mutual_attention(&mut g, q, z_va, z_as, &mix)?;
    println!("interactive: {}", g.value(inter));
    println!("mutual:      {}", g.value(mutual));
    Ok(())
}
