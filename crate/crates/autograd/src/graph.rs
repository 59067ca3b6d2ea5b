//! Tape-based reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every value is an `Array2<f64>`; vectors are `1 × d` rows. Binary
//! elementwise ops broadcast an operand with a single row against an
//! operand with many rows. Shape errors are programming errors and panic,
//! the same way `ndarray` does.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::params::ParamStore;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, normed: Array2<f64>, inv_std: Array1<f64> },
    MeanRows(Var),
    SumAll(Var),
    RepeatRows(Var),
    ConcatCols(Var, Var),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    PickCols { x: Var, cols: Vec<usize> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A single forward pass. Build one per evaluation; nodes are never freed
/// until the graph is dropped.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: BTreeMap<String, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sums `g` down to `shape`, undoing a row broadcast.
fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if g.dim() == shape {
        g.clone()
    } else {
        debug_assert_eq!(shape.0, 1);
        g.sum_axis(Axis(0)).insert_axis(Axis(0))
    }
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize), what: &str) -> (usize, usize) {
    assert_eq!(a.1, b.1, "{what}: column mismatch {a:?} vs {b:?}");
    if a.0 == b.0 {
        a
    } else if a.0 == 1 {
        b
    } else if b.0 == 1 {
        a
    } else {
        panic!("{what}: row mismatch {a:?} vs {b:?}");
    }
}

fn zip_broadcast(a: &Array2<f64>, b: &Array2<f64>, what: &str, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let dim = broadcast_dims(a.dim(), b.dim(), what);
    let a = a.broadcast(dim).expect("broadcast");
    let b = b.broadcast(dim).expect("broadcast");
    Zip::from(&a).and(&b).map_collect(|&x, &y| f(x, y))
}

/// Row-wise softmax with `-inf` entries receiving exactly zero mass.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max > f64::NEG_INFINITY, "softmax over a fully masked row");
        row.mapv_inplace(|v| if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() });
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { params: None, nodes: Vec::new(), param_vars: BTreeMap::new() }
    }

    /// A graph whose [`Graph::param`] leaves read from `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self { params: Some(params), nodes: Vec::new(), param_vars: BTreeMap::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on a non-scalar node");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn row_input(&mut self, values: &[f64]) -> Var {
        let row = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.input(row)
    }

    /// Leaf for a named parameter. Repeated calls return the same node so
    /// gradients accumulate in one place.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let store = self.params.expect("graph was built without a parameter store");
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.push(value, Op::Leaf);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.param_vars
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul: {:?} x {:?}", av.dim(), bv.dim());
        let out = av.dot(bv);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_broadcast(self.value(a), self.value(b), "add", |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_broadcast(self.value(a), self.value(b), "sub", |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_broadcast(self.value(a), self.value(b), "mul", |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| gelu_parts(x).0);
        self.push(out, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// `log(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| -softplus(-x));
        self.push(out, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp { x: a, lo, hi })
    }

    /// Row-wise softmax. Entries equal to `-inf` get zero probability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise softmax where `keep[i][j] == false` entries are treated as `-inf`.
    pub fn masked_softmax(&mut self, a: Var, keep: &Array2<bool>) -> Var {
        assert_eq!(self.shape(a), keep.dim(), "masked_softmax: mask shape");
        let masked = Zip::from(self.value(a))
            .and(keep)
            .map_collect(|&v, &k| if k { v } else { f64::NEG_INFINITY });
        let out = softmax_rows(&masked);
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Per-row standardization without gain or bias.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut normed = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (i, mut row) in normed.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            row.mapv_inplace(|v| (v - mean) * is);
        }
        let out = normed.clone();
        self.push(out, Op::LayerNorm { x: a, normed, inv_std })
    }

    /// Mean over rows: `n × d -> 1 × d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / x.nrows() as f64;
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Tiles a single row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), 1, "repeat_rows expects a single row");
        let out = x.broadcast((n, x.ncols())).expect("broadcast").to_owned();
        self.push(out, Op::RepeatRows(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let dim = broadcast_dims((av.nrows(), 0), (bv.nrows(), 0), "concat_cols");
        let (a2, b2) = (self.tile_to(a, dim.0), self.tile_to(b, dim.0));
        let out = ndarray::concatenate(Axis(1), &[self.value(a2).view(), self.value(b2).view()])
            .expect("concat");
        self.push(out, Op::ConcatCols(a2, b2))
    }

    fn tile_to(&mut self, a: Var, rows: usize) -> Var {
        if self.value(a).nrows() == rows {
            a
        } else {
            self.repeat_rows(a, rows)
        }
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows { x: a, start })
    }

    /// Output row `i` is input row `rows[i]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), rows);
        self.push(out, Op::GatherRows { x: a, rows: rows.to_vec() })
    }

    /// `n × c -> n × 1`, picking column `cols[i]` in row `i`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), cols.len(), "pick_cols: one column per row");
        let out = Array2::from_shape_fn((cols.len(), 1), |(i, _)| x[[i, cols[i]]]);
        self.push(out, Op::PickCols { x: a, cols: cols.to_vec() })
    }

    /// Mean softmax cross-entropy of `n × c` logits against one class per row.
    pub fn cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Var {
        let lsm = self.log_softmax(logits);
        let picked = self.pick_cols(lsm, classes);
        let m = self.mean(picked);
        self.neg(m)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, delta: Array2<f64>| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.dot(&bv.t()));
                acc(*b, av.t().dot(g));
            }
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, self.shape(*a)));
                acc(*b, reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, self.shape(*a)));
                acc(*b, -reduce_to(g, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = zip_broadcast(g, bv, "mul backward", |x, y| x * y);
                let gb = zip_broadcast(g, av, "mul backward", |x, y| x * y);
                acc(*a, reduce_to(&ga, av.dim()));
                acc(*b, reduce_to(&gb, bv.dim()));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Sigmoid(a) => acc(*a, Zip::from(g).and(out).map_collect(|&g, &s| g * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, Zip::from(g).and(out).map_collect(|&g, &t| g * (1.0 - t * t))),
            Op::Gelu(a) => {
                let x = self.value(*a);
                acc(*a, Zip::from(g).and(x).map_collect(|&g, &x| g * gelu_parts(x).1));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                acc(*a, Zip::from(g).and(x).map_collect(|&g, &x| g * sigmoid(x)));
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                acc(*a, Zip::from(g).and(x).map_collect(|&g, &x| g * sigmoid(-x)));
            }
            Op::Exp(a) => acc(*a, g * out),
            Op::Log(a) => acc(*a, g / self.value(*a)),
            Op::Square(a) => acc(*a, g * self.value(*a) * 2.0),
            Op::Sqrt(a) => acc(*a, Zip::from(g).and(out).map_collect(|&g, &r| g / (2.0 * r))),
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                acc(
                    *x,
                    Zip::from(g)
                        .and(xv)
                        .map_collect(|&g, &v| if v >= *lo && v <= *hi { g } else { 0.0 }),
                );
            }
            Op::Softmax(a) => {
                let dot = (g * out).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, out * &(g - &dot));
            }
            Op::LogSoftmax(a) => {
                let p = out.mapv(f64::exp);
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, g - &(p * &gsum));
            }
            Op::LayerNorm { x, normed, inv_std } => {
                let d = normed.ncols() as f64;
                let mut gx = Array2::zeros(normed.dim());
                for r in 0..normed.nrows() {
                    let gr = g.row(r);
                    let xr = normed.row(r);
                    let mean_g = gr.sum() / d;
                    let mean_gx = gr.dot(&xr) / d;
                    let mut row = gx.row_mut(r);
                    for j in 0..normed.ncols() {
                        row[j] = inv_std[r] * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                acc(*x, gx);
            }
            Op::MeanRows(a) => {
                let (n, c) = self.shape(*a);
                acc(*a, g.broadcast((n, c)).expect("broadcast").to_owned() / n as f64);
            }
            Op::SumAll(a) => acc(*a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
            Op::RepeatRows(a) => acc(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                acc(*a, g.slice(s![.., ..ca]).to_owned());
                acc(*b, g.slice(s![.., ca..]).to_owned());
            }
            Op::SliceRows { x, start } => {
                let mut gx = Array2::zeros(self.shape(*x));
                gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*x, gx);
            }
            Op::GatherRows { x, rows } => {
                let mut gx = Array2::zeros(self.shape(*x));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = gx.row_mut(r);
                    dst += &g.row(i);
                }
                acc(*x, gx);
            }
            Op::PickCols { x, cols } => {
                let mut gx = Array2::zeros(self.shape(*x));
                for (i, &c) in cols.iter().enumerate() {
                    gx[[i, c]] += g[[i, 0]];
                }
                acc(*x, gx);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss (or was created after it).
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter leaf of `graph`. Parameters that did not
    /// reach the loss get a zero gradient.
    pub fn params(&self, graph: &Graph<'_>) -> BTreeMap<String, Array2<f64>> {
        graph
            .param_vars()
            .iter()
            .map(|(name, &v)| {
                let g = self.wrt(v).cloned().unwrap_or_else(|| Array2::zeros(graph.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_places_no_mass_on_neg_inf() {
        let x = array![[1.0, f64::NEG_INFINITY, 3.0], [0.0, 0.0, f64::NEG_INFINITY]];
        let p = softmax_rows(&x);
        assert_eq!(p[[0, 1]], 0.0);
        assert_eq!(p[[1, 2]], 0.0);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_gradient_matches_closed_form() {
        let mut g = Graph::new();
        let a = g.input(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.input(array![[0.5], [-1.0]]);
        let c = g.matmul(a, b);
        let loss = g.sum(c);
        let grads = g.backward(loss);
        assert_eq!(grads.wrt(a).unwrap(), &array![[0.5, -1.0], [0.5, -1.0]]);
        assert_eq!(grads.wrt(b).unwrap(), &array![[4.0], [6.0]]);
    }

    #[test]
    fn broadcast_add_sums_gradient_over_rows() {
        let mut g = Graph::new();
        let x = g.input(Array2::ones((3, 2)));
        let b = g.row_input(&[1.0, 2.0]);
        let y = g.add(x, b);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        assert_eq!(grads.wrt(b).unwrap(), &array![[3.0, 3.0]]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut g = Graph::new();
        let x = g.input(Array2::zeros((2, 4)));
        let loss = g.cross_entropy(x, &[0, 3]);
        assert!((g.scalar(loss) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unused_nodes_have_no_gradient() {
        let mut g = Graph::new();
        let a = g.row_input(&[1.0]);
        let b = g.row_input(&[2.0]);
        let loss = g.sum(a);
        let grads = g.backward(loss);
        assert!(grads.wrt(b).is_none());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 2.0, 3.0, 10.0], [-5.0, 0.5, 0.25, 4.0]]);
        let y = g.layer_norm(x, 0.0);
        for row in g.value(y).rows() {
            let m = row.sum() / 4.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }
}
