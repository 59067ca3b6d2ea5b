use std::path::Path;

use ndarray::Array2;
use qvsum::cli::RunConfig;
use qvsum::conditional::{conditional_objective, ConditionalBatch, ConditionalConfig, ConditionalHeads};
use qvsum::dataset::PreparedDataset;
use qvsum::labels::gen_segment_pseudo_labels;
use qvsum::model::{train, Inputs, Model, ModelShape};
use qvsum::rng::rng;
use qvsum::synthetic::{write_corpus, SyntheticSpec};
use qvsum_autograd::gradcheck::{numeric_gradient, project_to_scalar, relative_error};
use qvsum_autograd::{Adam, AdamConfig, Graph, ParamStore, Var};
use serde_json::{json, Value};
use tempfile::TempDir;

fn load(dir: &Path, model: Value) -> (RunConfig, PreparedDataset) {
    let spec = SyntheticSpec { videos: 2, frames: 8, feature_dim: 8, ..SyntheticSpec::default() };
    let root = dir.join("corpus");
    let c = if root.exists() {
        qvsum::synthetic::SyntheticCorpus {
            manifest: root.join("manifest.jsonl"),
            dataset_config: root.join("dataset.json"),
            root,
        }
    } else {
        write_corpus(&root, &spec).unwrap()
    };
    let dataset: Value = serde_json::from_str(&std::fs::read_to_string(&c.dataset_config).unwrap()).unwrap();
    let text = json!({
        "seed": 11,
        "manifest": c.manifest,
        "dataset": dataset,
        "model": model,
        "out_dir": dir.join("run"),
        "cache_dir": c.root.join("cache"),
    })
    .to_string();
    let run = RunConfig::parse(&text, "test", dir).unwrap();
    let data = run.load_data().unwrap();
    (run, data)
}

fn small(variant: &str, fusion: &str) -> Value {
    json!({
        "variant": variant, "fusion_mode": fusion, "dim": 8, "embed_dim": 8, "ffn_dim": 8,
        "encoder_blocks": 1, "z_dim": 2, "epochs": 2, "learning_rate": 0.01,
        "pretrain_epochs": 2, "pretrain_learning_rate": 0.01,
    })
}

fn build(run: &RunConfig, data: &PreparedDataset) -> Model {
    let (frame_dim, clip_dim) = data.feature_dims();
    Model::new(run.model.clone(), ModelShape { vocab_size: data.vocab.size(), frame_dim, clip_dim }).unwrap()
}

/// Largest mismatch between analytic and central-difference gradients of
/// `f` over the named parameters. Near-zero gradients are compared
/// absolutely since their relative error only measures roundoff.
fn worst_error(model: &Model, names: &[&str], f: impl Fn(&mut Graph<'_>) -> Var) -> (String, f64) {
    let mut g = Graph::with_params(&model.store);
    let out = f(&mut g);
    let analytic = g.backward(out).params(&g);
    let mut worst = (String::new(), 0.0);
    for &name in names {
        let base = model.store.get(name).unwrap();
        let numeric = numeric_gradient(
            |x| {
                let mut p = model.store.clone();
                p.set(name, x.clone());
                let mut g = Graph::with_params(&p);
                let out = f(&mut g);
                g.scalar(out)
            },
            base,
            1e-5,
        );
        let a = analytic.get(name).cloned().unwrap_or_else(|| Array2::zeros(base.dim()));
        let abs = (&a - &numeric).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        let err = if a.iter().chain(numeric.iter()).all(|v| v.abs() < 1e-6) { abs * 1e3 } else { relative_error(&a, &numeric) };
        if err > worst.1 {
            worst = (name.to_string(), err);
        }
    }
    worst
}

/// Finite-difference check of one variant over every parameter with at
/// most 64 entries (biases, gains, small layers), which keeps the cost low
/// while touching each part of the network. Both the frame logits and the
/// training loss are checked. The conditional loss reconstructs a detached
/// copy of the fused features, so its parameters upstream of the fusion
/// only get the logits check.
fn check_variant(variant: &str, fusion: &str) {
    let dir = TempDir::new().unwrap();
    let (run, data) = load(dir.path(), small(variant, fusion));
    let model = build(&run, &data);
    let s = &data.samples[0];
    let names: Vec<&str> = model.store.iter().filter(|(_, v)| v.len() <= 64).map(|(k, _)| k.as_str()).collect();
    assert!(!names.is_empty());

    let (name, err) = worst_error(&model, &names, |g| {
        let l = model.frame_logits(g, &Inputs::clean(s)).unwrap();
        project_to_scalar(g, l)
    });
    assert!(err < 1e-4, "{variant}/{fusion} logits: {name} error {err:e}");

    let loss_names: Vec<&str> = match variant {
        "conditional" => names.iter().copied().filter(|n| n.starts_with("heads.")).collect(),
        _ => names.clone(),
    };
    let (name, err) = worst_error(&model, &loss_names, |g| match variant {
        "pseudo_pretrain" => model.segment_loss(g, s).unwrap(),
        _ => model.loss(g, s, 4).unwrap(),
    });
    assert!(err < 1e-4, "{variant}/{fusion} loss: {name} error {err:e}");
}

#[test]
fn gradients_queryvs_sum() {
    check_variant("queryvs", "sum");
}

#[test]
fn gradients_queryvs_concat() {
    check_variant("queryvs", "concat");
}

#[test]
fn gradients_queryvs_mul() {
    check_variant("queryvs", "mul");
}

#[test]
fn gradients_gpt2mvs() {
    check_variant("gpt2mvs", "sum");
}

#[test]
fn gradients_conditional() {
    check_variant("conditional", "sum");
}

#[test]
fn gradients_segment_pretraining() {
    check_variant("pseudo_pretrain", "sum");
}

#[test]
fn one_segment_per_pseudo_label() {
    let dir = TempDir::new().unwrap();
    let (_, data) = load(dir.path(), small("pseudo_pretrain", "sum"));
    for s in &data.samples {
        let labels = gen_segment_pseudo_labels(&s.gold[..s.original_len], data.config.fps).unwrap();
        assert_eq!(s.segment_classes.len(), labels.len());
        assert_eq!(s.segments_3d.nrows(), labels.len());
        assert_eq!(data.pseudo_labels[&s.video_id].len(), labels.len());
    }
}

#[test]
fn same_seed_same_model() {
    let dir = TempDir::new().unwrap();
    let (run, data) = load(dir.path(), small("gpt2mvs", "sum"));
    let mut a = build(&run, &data);
    let mut b = build(&run, &data);
    assert_eq!(a, b);
    let ha = train(&mut a, &data).unwrap();
    let hb = train(&mut b, &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha.metrics_csv(), hb.metrics_csv());
}

#[test]
fn conditional_objective_improves_under_adam() {
    let mut store = ParamStore::new();
    let cfg = ConditionalConfig { x_dim: 4, z_dim: 2, hidden: 8, num_classes: 4, helper_weight: 1.0 };
    let heads = ConditionalHeads::new(&mut store, &mut rng(2), "c", cfg).unwrap();
    let x = Array2::from_shape_fn((8, 4), |(i, j)| ((i * 3 + j) % 5) as f64 * 0.25 - 0.5);
    let t: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
    let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let objective = |store: &ParamStore| {
        let mut g = Graph::with_params(store);
        let xv = g.input(x.clone());
        let terms = conditional_objective(&mut g, &ConditionalBatch { x: xv, t: &t, y: &y }, &heads, 0).unwrap();
        let loss = g.scale(terms.total, -1.0);
        let grads = g.backward(loss).params(&g);
        (g.scalar(terms.total), grads)
    };
    let (start, _) = objective(&store);
    let mut adam = Adam::new(AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() });
    for _ in 0..50 {
        let (value, grads) = objective(&store);
        assert!(value.is_finite());
        adam.step(&mut store, &grads);
    }
    let (end, _) = objective(&store);
    assert!(end > start, "objective went from {start} to {end}");
}
