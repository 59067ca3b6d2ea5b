//! Maximizes the conditional objective (helper terms plus the evidence
//! lower bound) on a toy batch with Adam and prints its terms as training
//! goes.

use ndarray::Array2;
use qvsum::conditional::{conditional_objective, ConditionalBatch, ConditionalConfig, ConditionalHeads};
use qvsum::rng::rng;
use qvsum_autograd::{Adam, AdamConfig, Graph, ParamStore};

fn main() -> qvsum::Result<()> {
    let mut store = ParamStore::new();
    let cfg = ConditionalConfig { x_dim: 6, z_dim: 2, hidden: 16, num_classes: 4, helper_weight: 1.0 };
    let heads = ConditionalHeads::new(&mut store, &mut rng(0), "heads", cfg)?;
    let x = Array2::from_shape_fn((12, 6), |(i, j)| ((i * 5 + j * 2) % 7) as f64 / 3.5 - 1.0);
    let t: Vec<u8> = (0..12).map(|i| u8::from(i % 3 == 0)).collect();
    let y: Vec<usize> = (0..12).map(|i| (i / 3) % 4).collect();

    let mut adam = Adam::new(AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() });
    println!("step  objective   helper    log p(x)  log p(t)  log p(y)  KL");
    for step in 0..=200u64 {
        let mut g = Graph::with_params(&store);
        let xv = g.input(x.clone());
        let terms = conditional_objective(&mut g, &ConditionalBatch { x: xv, t: &t, y: &y }, &heads, step)?;
        if step % 40 == 0 {
            let v = |var| g.scalar(var);
            println!(
                "{step:>4}  {:>9.3}  {:>8.3}  {:>8.3}  {:>8.3}  {:>8.3}  {:.3}",
                v(terms.total), v(terms.helper), v(terms.log_px), v(terms.log_pt), v(terms.log_py), v(terms.kl)
            );
        }
        let loss = g.scale(terms.total, -1.0);
        let grads = g.backward(loss).params(&g);
        adam.step(&mut store, &grads);
    }
    Ok(())
}
