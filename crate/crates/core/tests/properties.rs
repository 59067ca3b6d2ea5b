use std::collections::BTreeSet;

use ndarray::{Array2, Array3, Array4};
use proptest::collection::vec;
use proptest::prelude::*;
use qvsum::conditional::{
    gaussian_kl, outcome_logits, posterior_params, ConditionalConfig, ConditionalHeads,
};
use qvsum::eval::{f_beta, frame_accuracy, generate_summary, temporal_f1, SummarySelection};
use qvsum::fusion::{fuse_simple, topk_keep, topk_mask, FuseMode};
use qvsum::ingest::{aggregate_majority, normalize_frame, repeat_frames, Normalization};
use qvsum::intervene::drop_words;
use qvsum::labels::{gen_segment_pseudo_labels, segment_to_class};
use qvsum::model::{argmax_rows, cross_entropy};
use qvsum::qencode::{bow_encode, build_vocab, decoder_block, masked_self_attention_with_weights, DecoderBlock};
use qvsum::rng::rng;
use qvsum_autograd::{Graph, ParamStore};

fn config() -> ProptestConfig {
    ProptestConfig { cases: 64, ..ProptestConfig::default() }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn block(d: usize) -> (ParamStore, DecoderBlock) {
    let mut store = ParamStore::new();
    let b = DecoderBlock::new(&mut store, &mut rng(7), "b", d, 6, 8, 1e-5, None).unwrap();
    (store, b)
}

fn selection(len: usize, frames: &BTreeSet<usize>) -> SummarySelection {
    SummarySelection {
        video_id: "v".into(),
        selected_frames: frames.iter().copied().collect(),
        budget: frames.len().max(1),
        original_len: len,
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn repeat_frames_is_cyclic(n in 1usize..6, extra in 0usize..10) {
        let frames = Array4::from_shape_fn((n, 3, 2, 2), |(i, c, y, x)| (i * 100 + c * 10 + y * 2 + x) as f32);
        let out = repeat_frames(&frames, n + extra).unwrap();
        for i in 0..n + extra {
            prop_assert_eq!(out.index_axis(ndarray::Axis(0), i), frames.index_axis(ndarray::Axis(0), i % n));
        }
        prop_assert_eq!(repeat_frames(&frames, n).unwrap(), frames);
    }

    #[test]
    fn normalization_is_affine(a in vec(0.0f32..1.0, 12), b in vec(0.0f32..1.0, 12)) {
        let fa = Array3::from_shape_vec((3, 2, 2), a).unwrap();
        let fb = Array3::from_shape_vec((3, 2, 2), b).unwrap();
        let norm = Normalization::default();
        let d = normalize_frame(&fa, &norm).unwrap() - normalize_frame(&fb, &norm).unwrap();
        for ((c, y, x), v) in d.indexed_iter() {
            let want = (fa[[c, y, x]] - fb[[c, y, x]]) as f64 / norm.std[c];
            prop_assert!((*v as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn majority_ignores_annotator_order(votes in vec(vec(0u8..4, 10), 1..6), rot in 0usize..6) {
        let mut rotated = votes.clone();
        let k = rot % votes.len();
        rotated.rotate_left(k);
        rotated.reverse();
        prop_assert_eq!(aggregate_majority(&votes).unwrap(), aggregate_majority(&rotated).unwrap());
    }

    #[test]
    fn segment_spans_tile_the_video(scores in vec(0u8..4, 1..40), fps in 1u32..4) {
        let labels = gen_segment_pseudo_labels(&scores, fps).unwrap();
        let mut next = 0;
        for l in &labels {
            prop_assert_eq!(l.span[0], next);
            prop_assert!(l.span[1] > l.span[0]);
            next = l.span[1];
        }
        prop_assert_eq!(next, scores.len());
    }

    #[test]
    fn constant_scores_give_constant_segments(c in 0u8..4, len in 1usize..30) {
        for l in gen_segment_pseudo_labels(&vec![c; len], 1).unwrap() {
            prop_assert_eq!(l.mean, f64::from(c));
            prop_assert_eq!(segment_to_class(l.mean).unwrap(), c);
        }
    }

    #[test]
    fn dropped_words_form_a_subsequence(words in vec("[a-z]{1,5}", 1..10), k in 0usize..10, seed in any::<u64>()) {
        let k = k.min(words.len() - 1);
        let out = drop_words(&words, k, seed).unwrap();
        prop_assert_eq!(out.len(), words.len() - k);
        let mut it = words.iter();
        prop_assert!(out.iter().all(|w| it.any(|x| x == w)));
        prop_assert_eq!(drop_words(&words, k, seed).unwrap(), out);
    }

    #[test]
    fn attention_rows_are_causal_distributions(x in matrix(5, 4), j in 0usize..5, bump in 0.1f64..3.0) {
        let (store, b) = block(4);
        let run = |x: &Array2<f64>| {
            let mut g = Graph::with_params(&store);
            let xv = g.input(x.clone());
            let (z, w) = masked_self_attention_with_weights(&mut g, xv, &b).unwrap();
            let d = decoder_block(&mut g, xv, &b).unwrap();
            (g.value(z).clone(), g.value(w).clone(), g.value(d).clone())
        };
        let (z, w, d) = run(&x);
        for (i, row) in w.outer_iter().enumerate() {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().skip(i + 1).all(|&p| p == 0.0));
        }
        let mut y = x.clone();
        y.row_mut(j).mapv_inplace(|v| v + bump);
        let (z2, _, d2) = run(&y);
        for i in 0..j {
            prop_assert_eq!(z.row(i), z2.row(i));
            for (a, b) in d.row(i).iter().zip(d2.row(i).iter()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn bow_counts_add(q1 in vec(0usize..5, 0..6), q2 in vec(0usize..5, 0..6)) {
        let words = ["red", "car", "dog", "park", "sky"];
        let vocab = build_vocab(&["red car dog park sky"]).unwrap();
        let text = |ids: &[usize]| ids.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
        let (a, b) = (text(&q1), text(&q2));
        let joined = format!("{a} {b}");
        prop_assert_eq!(bow_encode(&a, &vocab) + bow_encode(&b, &vocab), bow_encode(&joined, &vocab));
    }

    #[test]
    fn topk_keeps_the_row_max(a in matrix(3, 6), kappa in 1usize..=6) {
        let keep = topk_keep(&a, kappa).unwrap();
        let masked = topk_mask(&a, kappa).unwrap();
        for (i, row) in a.outer_iter().enumerate() {
            let max = argmax_rows(&row.to_owned().insert_axis(ndarray::Axis(0)))[0] as usize;
            prop_assert!(keep[[i, max]]);
            prop_assert_eq!(keep.row(i).iter().filter(|&&k| k).count(), kappa);
        }
        let mut g = Graph::new();
        let x = g.input(a.clone());
        let p = g.masked_softmax(x, &keep);
        for ((idx, &m), &v) in masked.indexed_iter().zip(g.value(p).iter()) {
            if m == f64::NEG_INFINITY {
                prop_assert_eq!(v, 0.0, "mass at masked entry {:?}", idx);
            }
        }
    }

    #[test]
    fn mul_fusion_commutes(q in matrix(1, 4), v in matrix(3, 4)) {
        let mut g = Graph::new();
        let (qv, vv) = (g.input(q), g.input(v));
        let a = fuse_simple(&mut g, qv, vv, FuseMode::Mul).unwrap();
        let b = fuse_simple(&mut g, vv, qv, FuseMode::Mul).unwrap();
        prop_assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn gaussian_kl_is_non_negative(mu in vec(-3.0f64..3.0, 1..6), s in vec(0.05f64..4.0, 6)) {
        let s = &s[..mu.len()];
        let kl = gaussian_kl(&mu, s);
        prop_assert!(kl >= 0.0);
        let at_prior = mu.iter().all(|&m| m == 0.0) && s.iter().all(|&v| v == 1.0);
        prop_assert_eq!(kl == 0.0, at_prior);
    }

    #[test]
    fn unselected_branch_never_leaks(flags in vec(0u8..2, 1..6), noise in 0.5f64..5.0) {
        let mut store = ParamStore::new();
        let cfg = ConditionalConfig { x_dim: 3, z_dim: 2, hidden: 4, num_classes: 4, helper_weight: 1.0 };
        let heads = ConditionalHeads::new(&mut store, &mut rng(1), "h", cfg).unwrap();
        let n = flags.len();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let z = Array2::from_shape_fn((n, 2), |(i, j)| (i + j) as f64 * 0.2 - 0.5);
        let y: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let run = |store: &ParamStore, t: &[u8]| {
            let mut g = Graph::with_params(store);
            let (xv, zv) = (g.input(x.clone()), g.input(z.clone()));
            let l = outcome_logits(&mut g, zv, t, &heads).unwrap();
            let (mu, var) = posterior_params(&mut g, xv, &y, t, &heads).unwrap();
            (g.value(l).clone(), g.value(mu).clone(), g.value(var).clone())
        };
        for (t, branch) in [(vec![1u8; n], ["f_y0", "g_mu0", "g_var0"]), (vec![0u8; n], ["f_y1", "g_mu1", "g_var1"])] {
            let base = run(&store, &t);
            let mut flipped = store.clone();
            let names: Vec<String> = store.names().filter(|k| branch.iter().any(|b| k.contains(b))).cloned().collect();
            for name in names {
                let w = flipped.get(&name).unwrap().mapv(|v| -v * noise + 0.1);
                flipped.set(name, w);
            }
            prop_assert_eq!(base, run(&flipped, &t));
        }
        // Mixed flags stay finite.
        let (l, _, var) = run(&store, &flags);
        prop_assert!(l.iter().all(|v| v.is_finite()) && var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn cross_entropy_shift_and_scale(logits in vec(-5.0f64..5.0, 4), c in 0usize..4, shift in -10.0f64..10.0, scale in 0.1f64..10.0) {
        let base = cross_entropy(&logits, c).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        prop_assert!(base >= 0.0);
        prop_assert!((cross_entropy(&shifted, c).unwrap() - base).abs() < 1e-9);
        let m = Array2::from_shape_vec((1, 4), logits.clone()).unwrap();
        prop_assert_eq!(argmax_rows(&m), argmax_rows(&(m.clone() * scale)));
    }

    #[test]
    fn summaries_are_sorted_bounded_subsets(pred in vec(0u8..4, 1..40), k in 1usize..20, cut in 0usize..40) {
        let len = 1 + cut % pred.len();
        let s = generate_summary("v", &pred, len, k).unwrap();
        let f = &s.selected_frames;
        prop_assert!(f.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(f.len() <= k && f.iter().all(|&i| i < len && pred[i] >= 2));
        let relevant = pred[..len].iter().filter(|&&p| p >= 2).count();
        prop_assert_eq!(f.len(), relevant.min(k));
    }

    #[test]
    fn temporal_f1_is_symmetric(len in 1usize..30, a in vec(any::<bool>(), 30), b in vec(any::<bool>(), 30)) {
        let pick = |m: &[bool]| (0..len).filter(|&i| m[i]).collect::<BTreeSet<_>>();
        let (sa, sb) = (selection(len, &pick(&a)), selection(len, &pick(&b)));
        let ab = temporal_f1(&sa, &sb).unwrap();
        let ba = temporal_f1(&sb, &sa).unwrap();
        prop_assert_eq!(ab.f1, ba.f1);
        prop_assert_eq!((ab.precision, ab.recall), (ba.recall, ba.precision));
        prop_assert!((0.0..=1.0).contains(&ab.f1));
    }

    #[test]
    fn f1_is_the_harmonic_mean(p in 0.01f64..1.0, r in 0.01f64..1.0) {
        let f = f_beta(&[(p, r)], 1.0).unwrap();
        prop_assert!((f - 2.0 / (1.0 / p + 1.0 / r)).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_permutation_equivariant(pairs in vec((0u8..4, 0u8..4), 1..30), rot in 0usize..30) {
        let (p, g): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let mut perm = pairs.clone();
        perm.rotate_left(rot % pairs.len());
        perm.reverse();
        let (pp, gp): (Vec<u8>, Vec<u8>) = perm.into_iter().unzip();
        prop_assert_eq!(frame_accuracy(&p, &g).unwrap(), frame_accuracy(&pp, &gp).unwrap());
    }
}
