//! Brute-force reference implementations shared by the integration tests.
//! Everything here is written from the definitions in f64 and deliberately
//! avoids the library's kernels.

#![allow(dead_code)]

pub mod paths;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tspm::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

pub fn tensor(rng: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, scale)).unwrap()
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// `a` is `[n, k]`, `b` is `[k, m]`, both row-major.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a[i * k + p] * b[p * m + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols).flat_map(softmax).collect()
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    -softmax(logits)[label].ln()
}

/// `x·w + b` with `w` stored `[in, out]`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = matmul(x, w, rows, din, dout);
    for r in 0..rows {
        for j in 0..dout {
            y[r * dout + j] += b[j];
        }
    }
    y
}

/// Single-head attention `softmax(q·kᵀ/√d)·v`: `q` `[sq, d]`, `k` `[sk, d]`,
/// `v` `[sk, dv]`. Returns the output and the weights.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    sq: usize,
    sk: usize,
    d: usize,
    dv: usize,
) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = matmul(q, &transpose(k, sk, d), sq, d, sk)
        .into_iter()
        .map(|s| s / (d as f64).sqrt())
        .collect();
    let w = softmax_rows(&scores, sk);
    (matmul(&w, v, sq, sk, dv), w)
}

/// Top-k by a full sort on (weight descending, index ascending), returned
/// in ascending index order.
pub fn topk(weights: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        ab / (na * nb)
    }
}

/// One bipartite merge by enumeration. Rows at even positions form A and
/// rows at odd positions form B. Every A row takes its most similar B row
/// (lowest B on ties); all A→B edges are ranked by similarity, lowest A on
/// ties, and the best `r` are merged into their B rows. Survivors keep their
/// relative order and become size-weighted means.
pub struct MergeResult {
    pub rows: Vec<Vec<f64>>,
    pub provenance: Vec<Vec<usize>>,
}

pub fn merge(
    rows: &[Vec<f64>],
    provenance: &[Vec<usize>],
    r: usize,
    protect_cls: bool,
) -> MergeResult {
    let m = rows.len();
    let a_set: Vec<usize> = (0..m)
        .filter(|i| i % 2 == 0 && !(protect_cls && *i == 0))
        .collect();
    let b_set: Vec<usize> = (0..m).filter(|i| i % 2 == 1).collect();
    let mut edges = Vec::new();
    for &a in &a_set {
        let mut best: Option<(usize, f64)> = None;
        for &b in &b_set {
            let s = cosine(&rows[a], &rows[b]);
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((b, s));
            }
        }
        let (b, s) = best.unwrap();
        edges.push((a, b, s));
    }
    edges.sort_by(|x, y| y.2.partial_cmp(&x.2).unwrap().then(x.0.cmp(&y.0)));
    edges.truncate(r);

    let mut target: Vec<Option<usize>> = vec![None; m];
    for &(a, b, _) in &edges {
        target[a] = Some(b);
    }
    let mut out_rows = Vec::new();
    let mut out_prov = Vec::new();
    for i in 0..m {
        if target[i].is_some() {
            continue;
        }
        let members: Vec<usize> = std::iter::once(i)
            .chain(edges.iter().filter(|e| e.1 == i).map(|e| e.0))
            .collect();
        let total: usize = members.iter().map(|&j| provenance[j].len()).sum();
        let d = rows[i].len();
        let mut mean = vec![0.0; d];
        for &j in &members {
            let w = provenance[j].len() as f64 / total as f64;
            for c in 0..d {
                mean[c] += w * rows[j][c];
            }
        }
        let mut p: Vec<usize> = members.iter().flat_map(|&j| provenance[j].clone()).collect();
        p.sort_unstable();
        out_rows.push(mean);
        out_prov.push(p);
    }
    MergeResult {
        rows: out_rows,
        provenance: out_prov,
    }
}

/// Reduce a tensor to a scalar by a fixed random projection, so that
/// gradient checks see a generic upstream gradient.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let r = tensor(&mut rng(seed ^ 0x9e37_79b9), &shape, 1.0);
    let r = tape.constant(r);
    let y = tape.mul(x, r).unwrap();
    tape.sum(y)
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}
