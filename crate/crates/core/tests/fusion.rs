mod common;

use proptest::prelude::*;
use rand::Rng;
use tspm::fusion::{answer_logits, argmax, fuse, init_fusion, predict, FusionVars, Pool, Prediction};
use tspm::optim::ParameterStore;
use tspm::{Tape, Tensor, TspmError};

fn fused(
    store: &ParameterStore,
    audio: &Tensor,
    frames: &Tensor,
    agg: Option<&Tensor>,
    pool: Pool,
    tanh: bool,
) -> Vec<f32> {
    let mut tape = Tape::new();
    let vars = FusionVars::bind(&store.bind(&mut tape), "f").unwrap();
    let a = tape.constant(audio.clone());
    let f = tape.constant(frames.clone());
    let g = agg.map(|g| tape.constant(g.clone()));
    let out = fuse(&mut tape, a, f, g, &vars.fc, pool, tanh).unwrap();
    tape.data(out).to_vec()
}

fn head(da: usize, dv: usize, c: usize, with_tokens: bool, seed: u64) -> ParameterStore {
    let mut store = ParameterStore::new();
    init_fusion(&mut store, "f", da, dv, c, with_tokens, &mut common::rng(seed)).unwrap();
    store
}

#[test]
fn zero_fc_returns_bias() {
    let (da, dv) = (3, 4);
    let mut store = head(da, dv, 5, true, 1);
    *store.get_mut("f.fc.weight").unwrap() = Tensor::zeros(&[da + 2 * dv, dv]);
    let bias = store.get("f.fc.bias").unwrap().clone();
    let mut rng = common::rng(2);
    for pool in [Pool::Mean, Pool::Max] {
        let a = common::tensor(&mut rng, &[2, 3, da], 4.0);
        let f = common::tensor(&mut rng, &[2, 3, dv], 4.0);
        let g = common::tensor(&mut rng, &[2, 3, 5, dv], 4.0);
        let out = fused(&store, &a, &f, Some(&g), pool, false);
        assert_eq!(out, [bias.data(), bias.data()].concat());
    }
}

#[test]
fn single_segment_single_token_is_one_linear_map() {
    let mut rng = common::rng(3);
    for case in 0..100 {
        let (da, dv) = (rng.random_range(1..5), rng.random_range(1..6));
        let store = head(da, dv, 3, true, case);
        let a = common::tensor(&mut rng, &[1, 1, da], 1.0);
        let f = common::tensor(&mut rng, &[1, 1, dv], 1.0);
        let g = common::tensor(&mut rng, &[1, 1, 1, dv], 1.0);
        let tanh = case % 2 == 0;
        let got = fused(&store, &a, &f, Some(&g), Pool::Mean, tanh);
        let x = common::to_f64(&[a.data(), f.data(), g.data()].concat());
        let w = common::to_f64(store.get("f.fc.weight").unwrap().data());
        let b = common::to_f64(store.get("f.fc.bias").unwrap().data());
        let mut y = common::linear(&x, &w, &b, 1, da + 2 * dv, dv);
        if tanh {
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        assert!(common::max_abs_diff(&got, &y) <= 1e-6);
    }
}

#[test]
fn duplicating_segments_leaves_mean_pool_unchanged() {
    let mut rng = common::rng(4);
    for case in 0..50 {
        let (k, s, da, dv) = (
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let store = head(da, dv, 3, true, case);
        let a = common::tensor(&mut rng, &[1, k, da], 1.0);
        let f = common::tensor(&mut rng, &[1, k, dv], 1.0);
        let g = common::tensor(&mut rng, &[1, k, s, dv], 1.0);
        let twice = |t: &Tensor| {
            let mut shape = t.shape().to_vec();
            shape[1] *= 2;
            Tensor::new(shape, t.data().repeat(2)).unwrap()
        };
        for pool in [Pool::Mean, Pool::Max] {
            let once = fused(&store, &a, &f, Some(&g), pool, true);
            let doubled = fused(&store, &twice(&a), &twice(&f), Some(&twice(&g)), pool, true);
            for (x, y) in once.iter().zip(&doubled) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn mismatched_segment_counts_are_rejected() {
    let store = head(2, 3, 4, true, 5);
    let mut tape = Tape::new();
    let vars = FusionVars::bind(&store.bind(&mut tape), "f").unwrap();
    let a = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let f = tape.constant(Tensor::zeros(&[1, 3, 3]));
    assert!(matches!(
        fuse(&mut tape, a, f, None, &vars.fc, Pool::Mean, true),
        Err(TspmError::Dimension { .. })
    ));
}

#[test]
fn unit_question_passes_fused_vector_through() {
    let (dv, c) = (5, 4);
    let store = head(2, dv, c, false, 6);
    let fav = common::tensor(&mut common::rng(7), &[1, dv], 1.0);
    let mut tape = Tape::new();
    let vars = FusionVars::bind(&store.bind(&mut tape), "f").unwrap();
    let fv = tape.constant(fav.clone());
    let ones = tape.constant(Tensor::ones(&[1, dv]));
    let gated = answer_logits(&mut tape, fv, ones, &vars.classifier).unwrap();
    let direct = vars.classifier.apply(&mut tape, fv).unwrap();
    assert_eq!(tape.data(gated), tape.data(direct));
}

#[test]
fn zero_classifier_is_uniform() {
    for c in [2, 5, 8] {
        let mut store = head(2, 3, c, true, 8);
        *store.get_mut("f.classifier.weight").unwrap() = Tensor::zeros(&[3, c]);
        *store.get_mut("f.classifier.bias").unwrap() = Tensor::zeros(&[c]);
        let mut rng = common::rng(9);
        let p = predict(
            &store,
            "f",
            &common::tensor(&mut rng, &[2, 2], 1.0),
            &common::tensor(&mut rng, &[2, 3], 1.0),
            Some(&common::tensor(&mut rng, &[2, 4, 3], 1.0)),
            &common::tensor(&mut rng, &[3], 1.0),
            Pool::Mean,
            true,
            Some(c - 1),
        )
        .unwrap();
        assert!(p.probabilities.iter().all(|&x| (x - 1.0 / c as f32).abs() < 1e-7));
        assert!((p.loss.unwrap() as f64 - (c as f64).ln()).abs() < 1e-6);
        assert_eq!(p.answer, 0);
    }
}

#[test]
fn end_to_end_loss_matches_composed_oracle() {
    let mut rng = common::rng(10);
    for case in 0..100 {
        let (k, s, da, dv, c) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(2..9),
        );
        let store = head(da, dv, c, true, case);
        let a = common::tensor(&mut rng, &[k, da], 1.0);
        let f = common::tensor(&mut rng, &[k, dv], 1.0);
        let g = common::tensor(&mut rng, &[k, s, dv], 1.0);
        let q = common::tensor(&mut rng, &[dv], 1.0);
        let label = rng.random_range(0..c);
        let p = predict(&store, "f", &a, &f, Some(&g), &q, Pool::Mean, true, Some(label)).unwrap();

        let mean_rows = |x: &[f32], rows: usize, width: usize| -> Vec<f64> {
            (0..width)
                .map(|j| (0..rows).map(|r| x[r * width + j] as f64).sum::<f64>() / rows as f64)
                .collect()
        };
        let tok = mean_rows(g.data(), k * s, dv);
        let x = [mean_rows(a.data(), k, da), mean_rows(f.data(), k, dv), tok].concat();
        let get = |n: &str| common::to_f64(store.get(n).unwrap().data());
        let fav: Vec<f64> = common::linear(&x, &get("f.fc.weight"), &get("f.fc.bias"), 1, da + 2 * dv, dv)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let e: Vec<f64> = fav.iter().zip(q.data()).map(|(v, &w)| v * w as f64).collect();
        let logits = common::linear(&e, &get("f.classifier.weight"), &get("f.classifier.bias"), 1, dv, c);
        let loss = common::cross_entropy(&logits, label);
        assert!((p.loss.unwrap() as f64 - loss).abs() <= 1e-5, "case {case}");
        assert!(common::max_abs_diff(&p.probabilities, &common::softmax(&logits)) <= 1e-6);
    }
}

#[test]
fn out_of_range_label_is_an_index_error() {
    assert!(matches!(
        Prediction::from_logits(&[0.1, 0.2], Some(2)),
        Err(TspmError::Index { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn predictions_are_normalized(
        logits in prop::collection::vec(-1e3f32..1e3, 1..20),
        shift in -50f32..50.0,
    ) {
        let p = Prediction::from_logits(&logits, Some(0)).unwrap();
        let sum: f64 = p.probabilities.iter().map(|&x| x as f64).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        prop_assert!(p.loss.unwrap().is_finite() && p.loss.unwrap() >= 0.0);
        prop_assert_eq!(p.answer, argmax(&p.probabilities));
        let best = p.probabilities[p.answer];
        prop_assert!(p.probabilities[..p.answer].iter().all(|&x| x < best));

        // Adding a constant to every logit does not move p.
        let shifted: Vec<f32> = logits.iter().map(|x| x + shift).collect();
        let q = Prediction::from_logits(&shifted, None).unwrap();
        for (a, b) in p.probabilities.iter().zip(&q.probabilities) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }
}
