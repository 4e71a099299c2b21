mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use tspm::checkpoint;
use tspm::features::{
    decode_question_features, encode_question_features, generate_synthetic, load_split, write_dataset,
    FeatureBundle, Split, SynthConfig,
};
use tspm::optim::{Moments, ParameterStore};
use tspm::prompt::Registry;
use tspm::{Tensor, TspmError};

fn bundle_case() -> impl Strategy<Value = FeatureBundle> {
    (1usize..6, 2usize..6, 1usize..5, 1usize..5).prop_flat_map(|(t, m, da, dv)| {
        let n = t * da + t * dv + t * m * dv;
        prop::collection::vec(-1e6f32..1e6, n).prop_map(move |v| {
            let (a, rest) = v.split_at(t * da);
            let (f, k) = rest.split_at(t * dv);
            FeatureBundle::new(
                "clip",
                Tensor::new(vec![t, da], a.to_vec()).unwrap(),
                Tensor::new(vec![t, dv], f.to_vec()).unwrap(),
                Tensor::new(vec![t, m, dv], k.to_vec()).unwrap(),
            )
            .unwrap()
        })
    })
}

fn store_case() -> impl Strategy<Value = ParameterStore> {
    let record = (prop::collection::vec(1usize..4, 0..4), any::<bool>());
    (prop::collection::vec(record, 1..6), 0u64..1000, any::<u64>()).prop_map(|(records, step, seed)| {
        let mut rng = common::rng(seed);
        let mut store = ParameterStore::new();
        let mut moments = BTreeMap::new();
        for (i, (shape, with_moments)) in records.into_iter().enumerate() {
            let name = format!("layer{i}.w");
            let t = common::tensor(&mut rng, &shape, 10.0);
            if with_moments {
                moments.insert(
                    name.clone(),
                    Moments {
                        m: common::uniform(&mut rng, t.numel(), 1.0).into_iter().map(|x| x as f32).collect(),
                        v: common::uniform(&mut rng, t.numel(), 1.0).into_iter().map(|x| x.abs() as f32).collect(),
                    },
                );
            }
            store.insert(name, t).unwrap();
        }
        store.set_optimizer_state(step, moments).unwrap();
        store
    })
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        segments: 6,
        tokens: 5,
        audio_dim: 4,
        visual_dim: 8,
        num_answers: 4,
        train: 12,
        val: 4,
        test: 4,
        planted_segments: 2,
        planted_tokens: 2,
        ..SynthConfig::default()
    }
}

fn is_format(e: &TspmError) -> bool {
    matches!(e, TspmError::Format { .. })
}

proptest! {
    #[test]
    fn bundle_round_trips(b in bundle_case()) {
        let back = FeatureBundle::decode("clip", &b.encode()).unwrap();
        prop_assert_eq!(back, b);
    }

    #[test]
    fn checkpoint_round_trips(store in store_case()) {
        let back = checkpoint::decode(&checkpoint::encode(&store).unwrap()).unwrap();
        prop_assert_eq!(back, store);
    }

    #[test]
    fn question_features_round_trip(seed in any::<u64>(), n in 0usize..5) {
        let data = generate_synthetic(&small_synth(), 7, &Registry::builtin()).unwrap();
        let mut rng = common::rng(seed);
        let samples: Vec<_> = data.split(Split::Train).samples[..n]
            .iter()
            .cloned()
            .map(|mut s| {
                s.question_feature = common::tensor(&mut rng, &[8], 5.0).into_data();
                s.prompt_feature = common::tensor(&mut rng, &[8], 5.0).into_data();
                s
            })
            .collect();
        let back = decode_question_features(&encode_question_features(&samples, 8).unwrap()).unwrap();
        prop_assert_eq!(back.len(), n);
        for (s, (q, p)) in samples.iter().zip(back) {
            prop_assert_eq!(&s.question_feature, &q);
            prop_assert_eq!(&s.prompt_feature, &p);
        }
    }
}

#[test]
fn every_truncation_is_a_format_error() {
    let data = generate_synthetic(&small_synth(), 1, &Registry::builtin()).unwrap();
    let ds = data.split(Split::Test);
    let bundle = ds.bundle(&ds.samples[0]).unwrap().encode();
    for len in 0..bundle.len() {
        let e = FeatureBundle::decode("clip", &bundle[..len]).unwrap_err();
        assert!(is_format(&e), "length {len}: {e}");
    }
    let avqq = encode_question_features(&ds.samples, 8).unwrap();
    for len in 0..avqq.len() {
        assert!(is_format(&decode_question_features(&avqq[..len]).unwrap_err()));
    }
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::ones(&[2, 3])).unwrap();
    let ckpt = checkpoint::encode(&store).unwrap();
    for len in 0..ckpt.len() {
        assert!(is_format(&checkpoint::decode(&ckpt[..len]).unwrap_err()), "length {len}");
    }
}

#[test]
fn bad_headers_are_rejected() {
    let b = FeatureBundle::new(
        "clip",
        Tensor::zeros(&[2, 3]),
        Tensor::zeros(&[2, 4]),
        Tensor::zeros(&[2, 3, 4]),
    )
    .unwrap()
    .encode();

    let mut magic = b.clone();
    magic[0] = b'X';
    assert!(is_format(&FeatureBundle::decode("clip", &magic).unwrap_err()));

    let mut version = b.clone();
    version[4] = 9;
    assert!(is_format(&FeatureBundle::decode("clip", &version).unwrap_err()));

    // T = 2^32 - 1 cannot match the payload and must not be allocated.
    let mut huge = b.clone();
    huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(is_format(&FeatureBundle::decode("clip", &huge).unwrap_err()));

    let mut trailing = b.clone();
    trailing.push(0);
    assert!(is_format(&FeatureBundle::decode("clip", &trailing).unwrap_err()));

    let mut nan = b;
    let at = nan.len() - 4;
    nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(FeatureBundle::decode("clip", &nan).is_err());

    let mut ckpt = checkpoint::encode(&ParameterStore::new()).unwrap();
    ckpt[3] = b'?';
    assert!(is_format(&checkpoint::decode(&ckpt).unwrap_err()));
}

#[test]
fn same_seed_writes_identical_files() {
    let write = |seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&small_synth(), seed, &Registry::builtin()).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let mut files = BTreeMap::new();
        for entry in walk(dir.path()) {
            let rel = entry.strip_prefix(dir.path()).unwrap().to_path_buf();
            files.insert(rel, std::fs::read(&entry).unwrap());
        }
        files
    };
    let a = write(5);
    assert!(!a.is_empty());
    assert_eq!(a, write(5));
    assert_ne!(a, write(6));
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn written_splits_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small_synth(), 2, &Registry::builtin()).unwrap();
    write_dataset(dir.path(), &data).unwrap();
    for split in Split::ALL {
        let loaded = load_split(dir.path(), split).unwrap();
        let orig = data.split(split);
        assert_eq!(loaded.samples, orig.samples);
        assert_eq!(loaded.manifest, orig.manifest);
        for s in &orig.samples {
            assert_eq!(loaded.bundle(s).unwrap(), orig.bundle(s).unwrap());
        }
    }
}

/// Fraction of samples whose best-scoring segment under `score` is planted.
fn planted_hit_rate(data: &tspm::features::Dataset, score: impl Fn(&[f32], &[f32]) -> f64) -> f64 {
    let hits = data
        .samples
        .iter()
        .filter(|s| {
            let b = data.bundle(s).unwrap();
            let best = (0..b.segments())
                .map(|t| (score(b.frames.row(t), &s.prompt_feature), t))
                .fold((f64::NEG_INFINITY, 0), |acc, x| if x.0 > acc.0 { x } else { acc })
                .1;
            s.planted.as_ref().unwrap().segment_indices.contains(&best)
        })
        .count();
    hits as f64 / data.samples.len() as f64
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[test]
fn strong_signal_is_found_by_cosine() {
    let cfg = SynthConfig {
        signal: 10.0,
        noise: 0.01,
        planted_segments: 1,
        train: 1000,
        val: 0,
        test: 0,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg, 3, &Registry::builtin()).unwrap();
    let rate = planted_hit_rate(data.split(Split::Train), |f, u| {
        let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        common::cosine(&to64(f), &to64(u))
    });
    assert!(rate >= 0.99, "rate {rate}");
}

#[test]
fn signal_above_noise_floor_is_separable() {
    let noise = 0.5f32;
    let dv = SynthConfig::default().visual_dim;
    let cfg = SynthConfig {
        signal: 5.0 * noise * (dv as f32).sqrt(),
        noise,
        train: 1000,
        val: 0,
        test: 0,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg, 4, &Registry::builtin()).unwrap();
    let rate = planted_hit_rate(data.split(Split::Train), dot);
    assert!(rate >= 0.99, "rate {rate}");
}

#[test]
fn planted_segments_carry_the_prompt_direction() {
    let cfg = SynthConfig {
        noise: 0.0,
        ..small_synth()
    };
    let data = generate_synthetic(&cfg, 8, &Registry::builtin()).unwrap();
    for ds in &data.splits {
        for s in &ds.samples {
            let b = ds.bundle(s).unwrap();
            let planted = &s.planted.as_ref().unwrap().segment_indices;
            for t in 0..b.segments() {
                let expected = if planted.contains(&t) { cfg.signal as f64 } else { 0.0 };
                assert!((dot(b.frames.row(t), &s.prompt_feature) - expected).abs() < 1e-5);
            }
        }
    }
}
