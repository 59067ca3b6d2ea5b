//! Cross-modal combination: simple fusions, Hadamard visual attention,
//! interactive and mutual attention, and the top-κ conditional attention
//! module.

use ndarray::Array2;
use qvsum_autograd::{Graph, ParamStore, Var};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{HadamardGate, LayerNorm, Linear, Mlp};
use crate::qencode::text_attention;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    Sum,
    Concat,
    Mul,
}

fn same_width(g: &Graph<'_>, a: Var, b: Var, what: &str) -> Result<()> {
    let (wa, wb) = (g.shape(a).1, g.shape(b).1);
    if wa == wb {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: widths {wa} and {wb} differ")))
    }
}

/// Combines a query vector with visual rows; a single-row operand is
/// broadcast over the other's rows.
pub fn fuse_simple(g: &mut Graph<'_>, q: Var, v: Var, mode: FuseMode) -> Result<Var> {
    match mode {
        FuseMode::Sum => {
            same_width(g, q, v, "sum fusion")?;
            Ok(g.add(q, v))
        }
        FuseMode::Mul => {
            same_width(g, q, v, "multiplicative fusion")?;
            Ok(g.mul(q, v))
        }
        FuseMode::Concat => Ok(g.concat_cols(q, v)),
    }
}

/// Width of `fuse_simple` output.
pub fn fused_width(mode: FuseMode, q: usize, v: usize) -> usize {
    match mode {
        FuseMode::Concat => q + v,
        _ => v,
    }
}

/// Hadamard visual attention; same shape as the input.
pub fn visual_attention(g: &mut Graph<'_>, phi: Var, gate: &HadamardGate) -> Var {
    gate.forward(g, phi)
}

/// A 1×1 convolution over a vector: a channel-mixing linear map with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMix {
    pub linear: Linear,
}

impl ChannelMix {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self { linear: Linear::new(store, rng, name, dim, out_dim, true)? })
    }
}

/// `Conv1×1(z_ta ⊙ z_va)`.
pub fn interactive_attention(g: &mut Graph<'_>, z_ta: Var, z_va: Var, mix: &ChannelMix) -> Result<Var> {
    same_width(g, z_ta, z_va, "interactive attention")?;
    let core = g.mul(z_ta, z_va);
    Ok(mix.linear.forward(g, core))
}

/// Pre-mix three-way product `z_ta ⊙ z_as ⊙ z_ast`.
pub fn mutual_core(g: &mut Graph<'_>, z_ta: Var, z_as: Var, z_ast: Var) -> Result<Var> {
    same_width(g, z_ta, z_as, "mutual attention")?;
    same_width(g, z_ta, z_ast, "mutual attention")?;
    let p = g.mul(z_ta, z_as);
    Ok(g.mul(p, z_ast))
}

/// `Conv1×1(z_ta ⊙ z_as ⊙ z_ast)`.
pub fn mutual_attention(g: &mut Graph<'_>, z_ta: Var, z_as: Var, z_ast: Var, mix: &ChannelMix) -> Result<Var> {
    let core = mutual_core(g, z_ta, z_as, z_ast)?;
    Ok(mix.linear.forward(g, core))
}

/// Keep-mask of the κ largest entries per row; among equal values the
/// lower column index wins.
pub fn topk_keep(a: &Array2<f64>, kappa: usize) -> Result<Array2<bool>> {
    let n = a.ncols();
    if kappa == 0 || kappa > n {
        return Err(Error::OutOfRange(format!("kappa {kappa} not in [1, {n}]")));
    }
    let mut keep = Array2::from_elem(a.dim(), false);
    for (i, row) in a.rows().into_iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        for &j in &order[..kappa] {
            keep[[i, j]] = true;
        }
    }
    Ok(keep)
}

/// Entries outside the row-wise top κ set to −∞.
pub fn topk_mask(a: &Array2<f64>, kappa: usize) -> Result<Array2<f64>> {
    let keep = topk_keep(a, kappa)?;
    Ok(Array2::from_shape_fn(a.dim(), |ix| if keep[ix] { a[ix] } else { f64::NEG_INFINITY }))
}

/// `ceil(n / 2)`, at least one.
pub fn default_kappa(n: usize) -> usize {
    n.div_ceil(2).max(1)
}

/// Single-head projections for top-κ conditional attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub dim: usize,
}

impl ConditionalAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, token_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), token_dim, dim, false)?,
            key: Linear::new(store, rng, &format!("{name}.key"), token_dim, dim, false)?,
            value: Linear::new(store, rng, &format!("{name}.value"), token_dim, dim, false)?,
            dim,
        })
    }
}

/// Intermediate matrices of one conditional attention pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    pub logits: Var,
    pub attention: Var,
    pub v_new: Var,
    pub v_kappa: Var,
    pub kappa: usize,
}

/// `A = softmax(QKᵀ/√d)`, `V_new = A V`,
/// `V_κ = softmax(τ_κ(QKᵀ/√d)) V_new`. `kappa` defaults to `ceil(n/2)`.
pub fn conditional_attention(
    g: &mut Graph<'_>,
    tokens: Var,
    kappa: Option<usize>,
    p: &ConditionalAttention,
) -> Result<AttentionState> {
    let n = g.shape(tokens).0;
    let kappa = kappa.unwrap_or_else(|| default_kappa(n));
    let q = p.query.forward(g, tokens);
    let k = p.key.forward(g, tokens);
    let v = p.value.forward(g, tokens);
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let logits = g.scale(logits, 1.0 / (p.dim as f64).sqrt());
    let attention = g.softmax(logits);
    let v_new = g.matmul(attention, v);
    let keep = topk_keep(g.value(logits), kappa)?;
    let masked = g.masked_softmax(logits, &keep);
    let v_kappa = g.matmul(masked, v_new);
    Ok(AttentionState { logits, attention, v_new, v_kappa, kappa })
}

/// Conditional attention followed by the textual and visual branches and a
/// fully connected layer over their concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalModule {
    pub attention: ConditionalAttention,
    pub norm: LayerNorm,
    pub ffn: Mlp,
    pub text_gate: HadamardGate,
    pub visual_gate: HadamardGate,
    pub fc: Linear,
    pub kappa: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalModuleConfig {
    pub token_dim: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub visual_dim: usize,
    pub out_dim: usize,
    pub kappa: Option<usize>,
    pub layer_norm_eps: f64,
}

impl ConditionalModule {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, c: &ConditionalModuleConfig) -> Result<Self> {
        Ok(Self {
            attention: ConditionalAttention::new(store, rng, &format!("{name}.attention"), c.token_dim, c.dim)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c.dim, c.layer_norm_eps)?,
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), c.dim, c.ffn_dim, c.dim)?,
            text_gate: HadamardGate::new(store, rng, &format!("{name}.text_attention"), c.dim)?,
            visual_gate: HadamardGate::new(store, rng, &format!("{name}.visual_attention"), c.visual_dim)?,
            fc: Linear::new(store, rng, &format!("{name}.fc"), c.dim + c.visual_dim, c.out_dim, true)?,
            kappa: c.kappa,
        })
    }

    /// Text summary `Z_ta' = TextAtten(FFN(LayerNorm(V_κ)))` (`1 × dim`).
    pub fn text_branch(&self, g: &mut Graph<'_>, tokens: Var) -> Result<Var> {
        let state = conditional_attention(g, tokens, self.kappa, &self.attention)?;
        let h = self.norm.forward(g, state.v_kappa);
        let h = self.ffn.forward(g, h);
        let n = g.shape(h).0;
        text_attention(g, h, &self.text_gate, n)
    }

    /// `X_mul = FC([Z_ta', VisualAtten(c3d)])`, one row per visual row.
    pub fn forward(&self, g: &mut Graph<'_>, tokens: Var, c3d: Var) -> Result<Var> {
        let z_ta = self.text_branch(g, tokens)?;
        self.combine(g, z_ta, c3d)
    }

    /// FC over the concatenated branches for a precomputed text summary.
    pub fn combine(&self, g: &mut Graph<'_>, z_ta: Var, c3d: Var) -> Result<Var> {
        if !g.value(c3d).iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite visual features".into()));
        }
        let z_va = visual_attention(g, c3d, &self.visual_gate);
        let joined = g.concat_cols(z_ta, z_va);
        Ok(self.fc.forward(g, joined))
    }
}

/// `conditional_module_forward` over a token matrix and per-frame 3D
/// features.
pub fn conditional_module_forward(g: &mut Graph<'_>, tokens: Var, c3d: Var, module: &ConditionalModule) -> Result<Var> {
    module.forward(g, tokens, c3d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use ndarray::array;

    #[test]
    fn simple_fusions() {
        let mut g = Graph::new();
        let v = g.input(array![[0.5, -2.0, 3.0]]);
        let ones = g.input(Array2::ones((1, 3)));
        let zeros = g.input(Array2::zeros((1, 3)));
        let m = fuse_simple(&mut g, ones, v, FuseMode::Mul).unwrap();
        let s = fuse_simple(&mut g, zeros, v, FuseMode::Sum).unwrap();
        assert_eq!(g.value(m), g.value(v));
        assert_eq!(g.value(s), g.value(v));
        let a = g.input(array![[1.0]]);
        let b = g.input(array![[2.0, 3.0]]);
        let c = fuse_simple(&mut g, a, b, FuseMode::Concat).unwrap();
        assert_eq!(g.value(c), &array![[1.0, 2.0, 3.0]]);
        assert!(fuse_simple(&mut g, a, b, FuseMode::Sum).is_err());
        assert!(fuse_simple(&mut g, a, b, FuseMode::Mul).is_err());
        assert_eq!(fused_width(FuseMode::Concat, 1, 2), 3);
    }

    #[test]
    fn topk_examples() {
        let a = array![[0.9, 0.1, 0.5]];
        let m = topk_mask(&a, 2).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![0.9, f64::NEG_INFINITY, 0.5]);
        assert_eq!(topk_mask(&a, 3).unwrap(), a);
        assert!(topk_mask(&a, 0).is_err() && topk_mask(&a, 4).is_err());
        let ties = array![[1.0, 1.0, 1.0]];
        assert_eq!(topk_keep(&ties, 2).unwrap().row(0).to_vec(), vec![true, true, false]);
        let mut g = Graph::new();
        let x = g.input(array![[0.3, 2.0, -1.0], [5.0, 0.0, 4.0]]);
        let keep = topk_keep(g.value(x), 1).unwrap();
        let p = g.masked_softmax(x, &keep);
        for row in g.value(p).rows() {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 2);
        }
    }

    #[test]
    fn single_token_conditional_attention_is_value() {
        let mut store = ParamStore::new();
        let p = ConditionalAttention::new(&mut store, &mut rng(0), "ca", 3, 4).unwrap();
        let mut g = Graph::with_params(&store);
        let t = g.input(array![[0.2, -0.4, 1.0]]);
        let st = conditional_attention(&mut g, t, None, &p).unwrap();
        let v = p.value.forward(&mut g, t);
        assert_eq!(st.kappa, 1);
        assert!((g.value(st.v_kappa) - g.value(v)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn module_output_width_and_bias() {
        let cfg = ConditionalModuleConfig {
            token_dim: 5,
            dim: 4,
            ffn_dim: 6,
            visual_dim: 7,
            out_dim: 3,
            kappa: None,
            layer_norm_eps: 1e-5,
        };
        let mut store = ParamStore::new();
        let module = ConditionalModule::new(&mut store, &mut rng(2), "cm", &cfg).unwrap();
        let mut g = Graph::with_params(&store);
        let t = g.input(Array2::from_elem((3, 5), 0.3));
        let c = g.input(Array2::from_elem((6, 7), 0.1));
        let x = conditional_module_forward(&mut g, t, c, &module).unwrap();
        assert_eq!(g.shape(x), (6, 3));

        let z_ta = g.input(Array2::zeros((1, 4)));
        let zc = g.input(Array2::zeros((2, 7)));
        let x = module.combine(&mut g, z_ta, zc).unwrap();
        let bias = store.get(module.fc.bias.as_ref().unwrap()).unwrap();
        for row in g.value(x).rows() {
            assert_eq!(row, bias.row(0));
        }
    }
}
