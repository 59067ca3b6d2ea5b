//! Every differentiable op against central finite differences.

use ndarray::Array2;
use qvsum_autograd::gradcheck::{check_inputs, check_params, project_to_scalar, DEFAULT_STEP};
use qvsum_autograd::{Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((rows, cols), |_| n.sample(&mut rng))
}

fn positive(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    randn(rows, cols, seed).mapv(|v| v.abs() + 0.5)
}

fn assert_small(errs: &[f64], tol: f64, what: &str) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < tol, "{what}: input {i} relative error {e:e}");
    }
}

type Build = fn(&mut Graph<'_>, &[Var]) -> Var;

#[test]
fn unary_ops() {
    let cases: Vec<(&str, Build, Array2<f64>)> = vec![
        ("sigmoid", |g, v| { let y = g.sigmoid(v[0]); project_to_scalar(g, y) }, randn(3, 4, 1)),
        ("tanh", |g, v| { let y = g.tanh(v[0]); project_to_scalar(g, y) }, randn(3, 4, 2)),
        ("gelu", |g, v| { let y = g.gelu(v[0]); project_to_scalar(g, y) }, randn(3, 4, 3)),
        ("softplus", |g, v| { let y = g.softplus(v[0]); project_to_scalar(g, y) }, randn(3, 4, 4)),
        ("log_sigmoid", |g, v| { let y = g.log_sigmoid(v[0]); project_to_scalar(g, y) }, randn(3, 4, 5)),
        ("exp", |g, v| { let y = g.exp(v[0]); project_to_scalar(g, y) }, randn(3, 4, 6)),
        ("log", |g, v| { let y = g.log(v[0]); project_to_scalar(g, y) }, positive(3, 4, 7)),
        ("sqrt", |g, v| { let y = g.sqrt(v[0]); project_to_scalar(g, y) }, positive(3, 4, 8)),
        ("square", |g, v| { let y = g.square(v[0]); project_to_scalar(g, y) }, randn(3, 4, 9)),
        ("softmax", |g, v| { let y = g.softmax(v[0]); project_to_scalar(g, y) }, randn(3, 5, 10)),
        ("log_softmax", |g, v| { let y = g.log_softmax(v[0]); project_to_scalar(g, y) }, randn(3, 5, 11)),
        ("layer_norm", |g, v| { let y = g.layer_norm(v[0], 1e-5); project_to_scalar(g, y) }, randn(3, 6, 12)),
        ("mean_rows", |g, v| { let y = g.mean_rows(v[0]); project_to_scalar(g, y) }, randn(4, 3, 13)),
        ("transpose", |g, v| { let y = g.transpose(v[0]); project_to_scalar(g, y) }, randn(2, 5, 14)),
        ("scale_offset", |g, v| { let y = g.scale(v[0], -1.7); let y = g.offset(y, 0.3); project_to_scalar(g, y) }, randn(2, 2, 15)),
        ("slice_rows", |g, v| { let y = g.slice_rows(v[0], 1, 3); project_to_scalar(g, y) }, randn(4, 3, 16)),
        ("gather_rows", |g, v| { let y = g.gather_rows(v[0], &[2, 0, 2, 1]); project_to_scalar(g, y) }, randn(3, 3, 17)),
        ("cross_entropy", |g, v| g.cross_entropy(v[0], &[1, 0, 3]), randn(3, 4, 18)),
        ("clamp_interior", |g, v| { let y = g.clamp(v[0], -10.0, 10.0); project_to_scalar(g, y) }, randn(2, 3, 19)),
    ];
    for (name, build, x) in cases {
        let errs = check_inputs(build, &[x], DEFAULT_STEP);
        assert_small(&errs, 1e-6, name);
    }
}

#[test]
fn binary_ops_with_broadcast() {
    let cases: Vec<(&str, Build, Array2<f64>, Array2<f64>)> = vec![
        ("matmul", |g, v| { let y = g.matmul(v[0], v[1]); project_to_scalar(g, y) }, randn(3, 4, 20), randn(4, 2, 21)),
        ("add_row", |g, v| { let y = g.add(v[0], v[1]); project_to_scalar(g, y) }, randn(3, 4, 22), randn(1, 4, 23)),
        ("sub_row_left", |g, v| { let y = g.sub(v[1], v[0]); project_to_scalar(g, y) }, randn(3, 4, 24), randn(1, 4, 25)),
        ("mul_row", |g, v| { let y = g.mul(v[0], v[1]); project_to_scalar(g, y) }, randn(3, 4, 26), randn(1, 4, 27)),
        ("mul_same", |g, v| { let y = g.mul(v[0], v[1]); project_to_scalar(g, y) }, randn(3, 4, 28), randn(3, 4, 29)),
        ("concat", |g, v| { let y = g.concat_cols(v[0], v[1]); project_to_scalar(g, y) }, randn(3, 2, 30), randn(1, 3, 31)),
    ];
    for (name, build, a, b) in cases {
        let errs = check_inputs(build, &[a, b], DEFAULT_STEP);
        assert_small(&errs, 1e-6, name);
    }
}

#[test]
fn masked_softmax_gradient() {
    let keep = ndarray::array![[true, false, true], [true, true, false], [false, false, true]];
    let errs = check_inputs(
        |g, v| {
            let y = g.masked_softmax(v[0], &keep);
            project_to_scalar(g, y)
        },
        &[randn(3, 3, 40)],
        DEFAULT_STEP,
    );
    assert_small(&errs, 1e-6, "masked_softmax");
}

#[test]
fn parameter_gradients_accumulate_over_reuse() {
    let mut store = ParamStore::new();
    store.insert("w", randn(3, 3, 50)).unwrap();
    store.insert("b", randn(1, 3, 51)).unwrap();
    let x = randn(2, 3, 52);
    let report = check_params(
        |g| {
            let xv = g.input(x.clone());
            let w = g.param("w");
            let b = g.param("b");
            let h = g.matmul(xv, w);
            let h = g.add(h, b);
            let h = g.tanh(h);
            let w_again = g.param("w");
            let h = g.matmul(h, w_again);
            project_to_scalar(g, h)
        },
        &store,
        None,
        DEFAULT_STEP,
    );
    for (name, err) in report {
        assert!(err < 1e-6, "{name}: {err:e}");
    }
}
