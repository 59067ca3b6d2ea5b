//! Top-κ conditional attention: after a dense pass, each row attends again
//! over only its κ highest-scoring tokens. Prints how the second pass
//! concentrates mass as κ shrinks.

use ndarray::Array2;
use qvsum::fusion::{conditional_attention, ConditionalAttention};
use qvsum::rng::rng;
use qvsum_autograd::{softmax_rows, Graph, ParamStore};

fn main() -> qvsum::Result<()> {
    let mut store = ParamStore::new();
    let attn = ConditionalAttention::new(&mut store, &mut rng(3), "attn", 8, 8)?;
    let tokens = Array2::from_shape_fn((6, 8), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);

    for kappa in [6, 3, 1] {
        let mut g = Graph::with_params(&store);
        let t = g.input(tokens.clone());
        let state = conditional_attention(&mut g, t, Some(kappa), &attn)?;
        let logits = g.value(state.logits).clone();
        let dense = softmax_rows(&logits);
        let kept = qvsum::fusion::topk_keep(&logits, kappa)?;
        let sparse: Vec<String> = logits
            .row(0)
            .iter()
            .zip(kept.row(0))
            .map(|(&v, &k)| if k { format!("{v:+.2}") } else { "  -  ".into() })
            .collect();
        println!("kappa {kappa}: row 0 logits kept [{}]", sparse.join(" "));
        let sparse_w = softmax_rows(&qvsum::fusion::topk_mask(&logits, kappa)?);
        let fmt = |r: ndarray::ArrayView1<f64>| r.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>().join(" ");
        println!("         dense weights  {}", fmt(dense.row(0)));
        println!("         top-k weights  {}", fmt(sparse_w.row(0)));
    }
    Ok(())
}
