//! Finite-difference checks of the three trainable paths: segment attention
//! weights, merge plus cross-modal aggregation, and fusion plus answer.
//! Each returns the relative error per checked input.

use rand::Rng;
use tspm::fusion::{answer_logits, fuse, init_fusion, FusionVars, Pool};
use tspm::optim::ParameterStore;
use tspm::spatial::{
    cross_modal_aggregate, init_block, init_cross_modal, merge_on_tape, BlockVars, CrossModalVars,
    MergeConfig,
};
use tspm::temporal::attention_weights;
use tspm::tensor::{finite_diff_check, LinearVars};
use tspm::{Result, Tape, Tensor, Var};

pub const H: f32 = 1e-3;
pub const TOL: f32 = 1e-3;
pub const INSTANCES: u64 = 20;

pub type Errors = Vec<(&'static str, f32)>;

fn err<F>(what: &'static str, x: &Tensor, f: F, out: &mut Errors)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    out.push((what, finite_diff_check(f, x, H).unwrap()));
}

pub fn temporal_attention(seed: u64) -> Errors {
    let mut rng = super::rng(600 + seed);
    let (b, t_len, dv) = (rng.random_range(1..3), rng.random_range(2..8), rng.random_range(2..6));
    let with_query = seed % 2 == 1;
    let dk = if with_query { rng.random_range(2..6) } else { dv };
    let prompt = super::tensor(&mut rng, &[b, dv], 1.0);
    let frames = super::tensor(&mut rng, &[b, t_len, dv], 1.0);
    let kw = super::tensor(&mut rng, &[dv, dk], 1.0);
    let kb = super::tensor(&mut rng, &[dk], 0.5);
    let qw = super::tensor(&mut rng, &[dv, dk], 1.0);
    let qb = super::tensor(&mut rng, &[dk], 0.5);

    #[derive(Clone, Copy)]
    enum Wrt {
        Prompt,
        Frames,
        KeyWeight,
        KeyBias,
        QueryWeight,
    }
    let run = |t: &mut Tape, x: Var, wrt: Wrt| -> Result<Var> {
        let c = |t: &mut Tape, v: &Tensor| t.constant(v.clone());
        let p = if let Wrt::Prompt = wrt { x } else { c(t, &prompt) };
        let f = if let Wrt::Frames = wrt { x } else { c(t, &frames) };
        let key = LinearVars {
            weight: if let Wrt::KeyWeight = wrt { x } else { c(t, &kw) },
            bias: if let Wrt::KeyBias = wrt { x } else { c(t, &kb) },
        };
        let query = with_query.then(|| LinearVars {
            weight: if let Wrt::QueryWeight = wrt { x } else { c(t, &qw) },
            bias: c(t, &qb),
        });
        let w = attention_weights(t, p, f, key, query)?;
        Ok(super::project(t, w, seed))
    };
    let mut out = Vec::new();
    err("temporal prompt", &prompt, |t, x| run(t, x, Wrt::Prompt), &mut out);
    err("temporal frames", &frames, |t, x| run(t, x, Wrt::Frames), &mut out);
    err("temporal key weight", &kw, |t, x| run(t, x, Wrt::KeyWeight), &mut out);
    err("temporal key bias", &kb, |t, x| run(t, x, Wrt::KeyBias), &mut out);
    if with_query {
        err("temporal query weight", &qw, |t, x| run(t, x, Wrt::QueryWeight), &mut out);
    }
    out
}

struct SpatialCase {
    store: ParameterStore,
    cfg: MergeConfig,
    tokens: Tensor,
    audio: Tensor,
}

fn spatial_case(seed: u64) -> SpatialCase {
    let mut rng = super::rng(700 + seed);
    let (n, m, d, da) = (rng.random_range(1..3), rng.random_range(4..9), 4, 3);
    let blocks = rng.random_range(1..3);
    let target = rng.random_range(2..m);
    let cfg = MergeConfig::even(m, target, blocks, if seed % 2 == 0 { 1 } else { 2 })
        .unwrap_or_else(|_| MergeConfig::even(m, m - 1, 1, 1).unwrap());
    let mut store = ParameterStore::new();
    for i in 0..cfg.num_blocks {
        init_block(&mut store, &format!("b{i}"), d, 2 * d, &mut rng).unwrap();
    }
    init_cross_modal(&mut store, "x", da, d, &mut rng).unwrap();
    SpatialCase {
        store,
        cfg,
        tokens: super::tensor(&mut rng, &[n, m, d], 1.0),
        audio: super::tensor(&mut rng, &[n, da], 1.0),
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SpatialWrt {
    Tokens,
    Audio,
    AttnQuery,
    Mlp,
    AudioProj,
    AudioKey,
}

pub const SPATIAL_TARGETS: [SpatialWrt; 6] = [
    SpatialWrt::Tokens,
    SpatialWrt::Audio,
    SpatialWrt::AttnQuery,
    SpatialWrt::Mlp,
    SpatialWrt::AudioProj,
    SpatialWrt::AudioKey,
];

fn spatial_run(
    case: &SpatialCase,
    t: &mut Tape,
    x: Var,
    wrt: SpatialWrt,
    seed: u64,
) -> Result<(Var, Vec<Vec<Vec<usize>>>)> {
    let bound = case.store.bind(t);
    let mut blocks = (0..case.cfg.num_blocks)
        .map(|i| BlockVars::bind(&bound, &format!("b{i}")))
        .collect::<Result<Vec<_>>>()?;
    let mut cross = CrossModalVars::bind(&bound, "x")?;
    match wrt {
        SpatialWrt::AttnQuery => blocks[0].q.weight = x,
        SpatialWrt::Mlp => blocks[0].fc1.weight = x,
        SpatialWrt::AudioProj => cross.audio_proj.weight = x,
        SpatialWrt::AudioKey => cross.audio_k.weight = x,
        _ => {}
    }
    let tokens = match wrt {
        SpatialWrt::Tokens => x,
        _ => t.constant(case.tokens.clone()),
    };
    let audio = match wrt {
        SpatialWrt::Audio => x,
        _ => t.constant(case.audio.clone()),
    };
    let (merged, prov) = merge_on_tape(t, tokens, &blocks, &case.cfg)?;
    let (agg, _) = cross_modal_aggregate(t, merged, audio, &cross)?;
    Ok((super::project(t, agg, seed), prov))
}

// The merge plan is piecewise constant in its inputs; a probe that flips it
// measures a jump, not a derivative, so such instances are not gradient
// checks at all.
fn plan_is_stable(case: &SpatialCase, x: &Tensor, wrt: SpatialWrt) -> bool {
    let prov = |probe: &Tensor| {
        let mut t = Tape::new();
        let v = t.constant(probe.clone());
        spatial_run(case, &mut t, v, wrt, 0).unwrap().1
    };
    let base = prov(x);
    (0..x.numel()).all(|i| {
        [H, -H].iter().all(|&h| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            prov(&p) == base
        })
    })
}

/// Relative errors of `INSTANCES` merge-stable instances for `wrt`.
pub fn merge_and_aggregate(wrt: SpatialWrt) -> Vec<f32> {
    let mut out = Vec::new();
    let mut seed = 0;
    while (out.len() as u64) < INSTANCES {
        seed += 1;
        assert!(seed < 10 * INSTANCES, "too few merge-stable instances");
        let case = spatial_case(seed);
        let x = match wrt {
            SpatialWrt::Tokens => case.tokens.clone(),
            SpatialWrt::Audio => case.audio.clone(),
            SpatialWrt::AttnQuery => case.store.get("b0.attn.q.weight").unwrap().clone(),
            SpatialWrt::Mlp => case.store.get("b0.mlp.fc1.weight").unwrap().clone(),
            SpatialWrt::AudioProj => case.store.get("x.audio_proj.weight").unwrap().clone(),
            SpatialWrt::AudioKey => case.store.get("x.audio_attn.k.weight").unwrap().clone(),
        };
        if !plan_is_stable(&case, &x, wrt) {
            continue;
        }
        let f = |t: &mut Tape, v: Var| Ok(spatial_run(&case, t, v, wrt, seed)?.0);
        out.push(finite_diff_check(f, &x, H).unwrap());
    }
    out
}

pub fn fusion_and_answer(seed: u64) -> Errors {
    let mut rng = super::rng(800 + seed);
    let (b, k, s, da, dv, c) = (
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(2..6),
    );
    let with_tokens = seed % 3 != 0;
    let pool = if seed % 2 == 0 { Pool::Mean } else { Pool::Max };
    let tanh = seed % 4 < 2;
    let mut store = ParameterStore::new();
    init_fusion(&mut store, "f", da, dv, c, with_tokens, &mut rng).unwrap();
    let audio = super::tensor(&mut rng, &[b, k, da], 1.0);
    let frames = super::tensor(&mut rng, &[b, k, dv], 1.0);
    let agg = super::tensor(&mut rng, &[b, k, s, dv], 1.0);
    let question = super::tensor(&mut rng, &[b, dv], 1.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();

    #[derive(Clone, Copy, PartialEq)]
    enum Wrt {
        Audio,
        Frames,
        Agg,
        Question,
        Fc,
        Classifier,
    }
    let run = |t: &mut Tape, x: Var, wrt: Wrt| -> Result<Var> {
        let mut vars = FusionVars::bind(&store.bind(t), "f")?;
        let pick = |t: &mut Tape, w: Wrt, v: &Tensor| if wrt == w { x } else { t.constant(v.clone()) };
        let a = pick(t, Wrt::Audio, &audio);
        let f = pick(t, Wrt::Frames, &frames);
        let g = with_tokens.then(|| pick(t, Wrt::Agg, &agg));
        let q = pick(t, Wrt::Question, &question);
        match wrt {
            Wrt::Fc => vars.fc.weight = x,
            Wrt::Classifier => vars.classifier.weight = x,
            _ => {}
        }
        let fused = fuse(t, a, f, g, &vars.fc, pool, tanh)?;
        let logits = answer_logits(t, fused, q, &vars.classifier)?;
        t.cross_entropy(logits, &labels)
    };
    let mut out = Vec::new();
    err("fusion audio", &audio, |t, x| run(t, x, Wrt::Audio), &mut out);
    err("fusion frames", &frames, |t, x| run(t, x, Wrt::Frames), &mut out);
    if with_tokens {
        err("fusion tokens", &agg, |t, x| run(t, x, Wrt::Agg), &mut out);
    }
    err("fusion question", &question, |t, x| run(t, x, Wrt::Question), &mut out);
    let fc = store.get("f.fc.weight").unwrap().clone();
    err("fusion fc", &fc, |t, x| run(t, x, Wrt::Fc), &mut out);
    let cls = store.get("f.classifier.weight").unwrap().clone();
    err("answer classifier", &cls, |t, x| run(t, x, Wrt::Classifier), &mut out);
    out
}
