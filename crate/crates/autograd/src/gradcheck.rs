//! Central finite-difference oracles. These only ever read forward values,
//! so they stay independent of the backward rules they are used to check.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::graph::{Graph, Var};
use crate::params::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Gradient norms below this are treated as zero: central differences with
/// [`DEFAULT_STEP`] carry roundoff of about `1e-10` per entry, so smaller
/// gradients cannot be resolved relatively.
pub const ZERO_GRADIENT_NORM: f64 = 1e-7;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both
/// are below [`ZERO_GRADIENT_NORM`].
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale < ZERO_GRADIENT_NORM {
        diff
    } else {
        diff / scale
    }
}

/// Numerical gradient of a scalar function of one matrix.
pub fn numeric_gradient(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe);
        probe[idx] = orig - h;
        let down = f(&probe);
        probe[idx] = orig;
        grad[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// Checks the gradient of `build` with respect to each input matrix.
/// `build` receives the input leaves and must return a scalar node.
/// Returns one relative error per input.
pub fn check_inputs<F>(build: F, inputs: &[Array2<f64>], h: f64) -> Vec<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let eval = |values: &[Array2<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.input(v.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.input(v.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    (0..inputs.len())
        .map(|k| {
            let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(inputs[k].dim()));
            let numeric = numeric_gradient(
                |x| {
                    let mut vals = inputs.to_vec();
                    vals[k] = x.clone();
                    eval(&vals)
                },
                &inputs[k],
                h,
            );
            relative_error(&analytic, &numeric)
        })
        .collect()
}

/// Checks parameter gradients of a scalar built from `params`. Only the
/// parameters named in `names` are perturbed (all when `None`).
pub fn check_params<F>(build: F, params: &ParamStore, names: Option<&[&str]>, h: f64) -> BTreeMap<String, f64>
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let mut g = Graph::with_params(params);
    let out = build(&mut g);
    let analytic = g.backward(out).params(&g);
    let selected: Vec<String> = match names {
        Some(ns) => ns.iter().map(|s| s.to_string()).collect(),
        None => params.names().cloned().collect(),
    };
    let mut report = BTreeMap::new();
    for name in selected {
        let base = params.get(&name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).clone();
        let numeric = numeric_gradient(
            |x| {
                let mut p = params.clone();
                p.set(name.clone(), x.clone());
                let mut g = Graph::with_params(&p);
                let out = build(&mut g);
                g.scalar(out)
            },
            &base,
            h,
        );
        let a = analytic.get(&name).cloned().unwrap_or_else(|| Array2::zeros(base.dim()));
        report.insert(name, relative_error(&a, &numeric));
    }
    report
}

/// Reduces any node to a scalar through fixed pseudo-random weights, so a
/// gradient check of a matrix-valued op exercises every output entry.
pub fn project_to_scalar(g: &mut Graph<'_>, v: Var) -> Var {
    let (r, c) = g.shape(v);
    let w = Array2::from_shape_fn((r, c), |(i, j)| {
        let k = (i * 31 + j * 17 + 7) as f64;
        (k * 0.618_033_988_75).fract() - 0.5
    });
    let wv = g.input(w);
    let prod = g.mul(v, wv);
    g.sum(prod)
}
