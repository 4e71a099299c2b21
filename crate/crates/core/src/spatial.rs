//! Spatial perception: gather the token grids of the selected segments,
//! shrink each grid by bipartite token merging inside a small transformer
//! stack, then let the audio of each segment attend over its merged tokens.

use rand::Rng;

use crate::error::{dim_err, Result, TspmError};
use crate::optim::{Bound, ParameterStore};
use crate::tensor::{LinearVars, Tape, Tensor, Var};

const LN_EPS: f32 = 1e-5;

/// Block count, per-block merge counts and attention heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeConfig {
    pub num_blocks: usize,
    pub r_schedule: Vec<usize>,
    pub heads: usize,
    pub protect_cls: bool,
}

impl MergeConfig {
    /// Spread `tokens - target` removals over `num_blocks`, earlier blocks
    /// taking the remainder.
    pub fn even(tokens: usize, target: usize, num_blocks: usize, heads: usize) -> Result<Self> {
        if num_blocks == 0 || target == 0 || target > tokens {
            return Err(TspmError::Config(format!(
                "cannot merge {tokens} tokens to {target} over {num_blocks} blocks"
            )));
        }
        let total = tokens - target;
        let (base, extra) = (total / num_blocks, total % num_blocks);
        let cfg = Self {
            num_blocks,
            r_schedule: (0..num_blocks).map(|b| base + usize::from(b < extra)).collect(),
            heads,
            protect_cls: false,
        };
        cfg.validate(tokens)?;
        Ok(cfg)
    }

    pub fn target(&self, tokens: usize) -> usize {
        tokens.saturating_sub(self.r_schedule.iter().sum())
    }

    /// Check the schedule against `tokens` input tokens per segment.
    pub fn validate(&self, tokens: usize) -> Result<()> {
        if self.num_blocks == 0 || self.r_schedule.len() != self.num_blocks {
            return Err(TspmError::Config(format!(
                "r_schedule has {} entries for {} blocks",
                self.r_schedule.len(),
                self.num_blocks
            )));
        }
        if self.heads == 0 {
            return Err(TspmError::Config("heads must be positive".into()));
        }
        let mut m = tokens;
        for &r in &self.r_schedule {
            if r > 0 {
                check_merge_count(m, r, self.protect_cls)?;
            }
            m -= r;
            if m < 2 {
                return Err(TspmError::Config(format!(
                    "schedule {:?} leaves {m} tokens from {tokens}",
                    self.r_schedule
                )));
            }
        }
        Ok(())
    }
}

fn check_merge_count(m: usize, r: usize, protect_cls: bool) -> Result<()> {
    let a = m.div_ceil(2) - usize::from(protect_cls);
    let b = m / 2;
    if m < 2 || r == 0 || r > a.min(b) {
        return Err(TspmError::Config(format!(
            "cannot remove {r} of {m} tokens in one bipartite step"
        )));
    }
    Ok(())
}

/// A kept similarity edge, by position in the step's input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeEdge {
    pub from: usize,
    pub to: usize,
    pub similarity: f32,
}

/// How one merge step maps input rows to output rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    /// Output position -> input positions combined into it, ascending.
    pub groups: Vec<Vec<usize>>,
    pub edges: Vec<MergeEdge>,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Plan a bipartite merge of the `m` rows of `x` (`[m, d]` row-major).
///
/// Even positions propose an edge to their most similar odd position (ties
/// to the lower one); the `r` strongest proposals are kept, ties to the
/// lower proposer.
pub fn plan_merge(x: &[f32], d: usize, r: usize, protect_cls: bool) -> Result<MergePlan> {
    let m = x.len() / d;
    check_merge_count(m, r, protect_cls)?;
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let first_a = if protect_cls { 2 } else { 0 };
    let mut proposals: Vec<(usize, usize, f64)> = (first_a..m)
        .step_by(2)
        .map(|a| {
            let mut best = (1, f64::NEG_INFINITY);
            for b in (1..m).step_by(2) {
                let s = cosine(row(a), row(b));
                if s > best.1 {
                    best = (b, s);
                }
            }
            (a, best.0, best.1)
        })
        .collect();
    proposals.sort_by(|p, q| q.2.total_cmp(&p.2).then(p.0.cmp(&q.0)));
    proposals.truncate(r);
    proposals.sort_by_key(|p| p.0);

    let mut absorbed_into = vec![None; m];
    for &(a, b, _) in &proposals {
        absorbed_into[a] = Some(b);
    }
    let mut slot = vec![usize::MAX; m];
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(m - r);
    for i in 0..m {
        if absorbed_into[i].is_none() {
            slot[i] = groups.len();
            groups.push(vec![i]);
        }
    }
    for &(a, b, _) in &proposals {
        groups[slot[b]].push(a);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(MergePlan {
        groups,
        edges: proposals
            .into_iter()
            .map(|(from, to, s)| MergeEdge {
                from,
                to,
                similarity: s as f32,
            })
            .collect(),
    })
}

/// Row weights realising a size-weighted mean for each group.
fn plan_weights(plan: &MergePlan, provenance: &[Vec<usize>], offset: usize) -> Vec<Vec<(usize, f32)>> {
    plan.groups
        .iter()
        .map(|g| {
            let total: usize = g.iter().map(|&i| provenance[i].len()).sum();
            g.iter()
                .map(|&i| (offset + i, provenance[i].len() as f32 / total as f32))
                .collect()
        })
        .collect()
}

fn merge_provenance(plan: &MergePlan, provenance: &[Vec<usize>]) -> Vec<Vec<usize>> {
    plan.groups
        .iter()
        .map(|g| {
            let mut p: Vec<usize> = g.iter().flat_map(|&i| provenance[i].iter().copied()).collect();
            p.sort_unstable();
            p
        })
        .collect()
}

/// `[{0}, {1}, .., {m-1}]`.
pub fn initial_provenance(m: usize) -> Vec<Vec<usize>> {
    (0..m).map(|i| vec![i]).collect()
}

/// Result of one merge step on plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeStepOutput {
    pub tokens: Tensor,
    pub edges: Vec<MergeEdge>,
    pub provenance: Vec<Vec<usize>>,
}

/// Remove `r` tokens from `x` (`[m, D]`) by bipartite merging. `provenance`
/// gives the original tokens behind each row and sets the mean weights.
pub fn bipartite_merge_step(
    x: &Tensor,
    provenance: &[Vec<usize>],
    r: usize,
    protect_cls: bool,
) -> Result<MergeStepOutput> {
    if x.rank() != 2 || provenance.len() != x.shape()[0] {
        return Err(dim_err("bipartite_merge_step", x.shape(), &[provenance.len()]));
    }
    let d = x.shape()[1];
    let plan = plan_merge(x.data(), d, r, protect_cls)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = tape.combine_rows(
        xv,
        plan_weights(&plan, provenance, 0),
        &[plan.groups.len(), d],
    )?;
    Ok(MergeStepOutput {
        tokens: tape.value(out).clone(),
        provenance: merge_provenance(&plan, provenance),
        edges: plan.edges,
    })
}

/// Copy the token grids of the segments in `omega`, in `omega` order.
pub fn gather_tokens(tokens: &Tensor, omega: &[usize]) -> Result<Tensor> {
    if tokens.rank() != 3 {
        return Err(dim_err("gather_tokens", tokens.shape(), &[omega.len()]));
    }
    let (t, m, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    if omega.is_empty() {
        return Err(TspmError::Contract("empty segment selection".into()));
    }
    let mut out = Vec::with_capacity(omega.len() * m * d);
    for &i in omega {
        if i >= t {
            return Err(TspmError::Index {
                what: "segment",
                index: i,
                len: t,
            });
        }
        out.extend_from_slice(tokens.row(i));
    }
    Tensor::new(vec![omega.len(), m, d], out)
}

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
    pub ln2: (Var, Var),
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

impl BlockVars {
    pub fn bind(bound: &Bound<'_>, prefix: &str) -> Result<Self> {
        let ln = |n: &str| -> Result<(Var, Var)> {
            Ok((
                bound.get(&format!("{prefix}.{n}.gamma"))?,
                bound.get(&format!("{prefix}.{n}.beta"))?,
            ))
        };
        let lin = |n: &str| bound.linear(&format!("{prefix}.{n}"));
        Ok(Self {
            ln1: ln("ln1")?,
            q: lin("attn.q")?,
            k: lin("attn.k")?,
            v: lin("attn.v")?,
            o: lin("attn.o")?,
            ln2: ln("ln2")?,
            fc1: lin("mlp.fc1")?,
            fc2: lin("mlp.fc2")?,
        })
    }
}

/// Create the parameters of one block of width `d` with MLP width `hidden`.
pub fn init_block(
    store: &mut ParameterStore,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for ln in ["ln1", "ln2"] {
        store.insert(format!("{prefix}.{ln}.gamma"), Tensor::ones(&[d]))?;
        store.insert(format!("{prefix}.{ln}.beta"), Tensor::zeros(&[d]))?;
    }
    for p in ["attn.q", "attn.k", "attn.v", "attn.o"] {
        store.init_linear(&format!("{prefix}.{p}"), d, d, rng)?;
    }
    store.init_linear(&format!("{prefix}.mlp.fc1"), d, hidden, rng)?;
    store.init_linear(&format!("{prefix}.mlp.fc2"), hidden, d, rng)
}

fn multi_head_attention(tape: &mut Tape, x: Var, b: &BlockVars, heads: usize) -> Result<Var> {
    let d = *tape.shape(x).last().expect("rank 3");
    if d % heads != 0 {
        return Err(TspmError::Config(format!("{heads} heads do not divide width {d}")));
    }
    let q = b.q.apply(tape, x)?;
    let k = b.k.apply(tape, x)?;
    let v = b.v.apply(tape, x)?;
    let out = if heads == 1 {
        tape.scaled_dot_attention(q, k, v)?.0
    } else {
        let dh = d / heads;
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.narrow(q, h * dh, dh)?;
            let kh = tape.narrow(k, h * dh, dh)?;
            let vh = tape.narrow(v, h * dh, dh)?;
            parts.push(tape.scaled_dot_attention(qh, kh, vh)?.0);
        }
        let rank = tape.shape(x).len();
        tape.concat(&parts, rank - 1)?
    };
    b.o.apply(tape, out)
}

/// One block over `x` (`[N, m, D]`): attention with residual, a merge of
/// `r` tokens per segment, then the MLP with residual. `provenance[n]`
/// tracks segment `n` and is updated in place.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    b: &BlockVars,
    heads: usize,
    r: usize,
    protect_cls: bool,
    provenance: &mut [Vec<Vec<usize>>],
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || provenance.len() != s[0] || provenance.iter().any(|p| p.len() != s[1]) {
        return Err(dim_err("block_forward", &s, &[provenance.len()]));
    }
    let (n, m, d) = (s[0], s[1], s[2]);
    let h = tape.layer_norm(x, b.ln1.0, b.ln1.1, LN_EPS)?;
    let attn = multi_head_attention(tape, h, b, heads)?;
    let mut x = tape.add(x, attn)?;

    if r > 0 {
        let mut groups = Vec::with_capacity(n * (m - r));
        let values = tape.data(x).to_vec();
        for (seg, prov) in provenance.iter_mut().enumerate() {
            let rows = &values[seg * m * d..(seg + 1) * m * d];
            let plan = plan_merge(rows, d, r, protect_cls)?;
            groups.extend(plan_weights(&plan, prov, seg * m));
            *prov = merge_provenance(&plan, prov);
        }
        x = tape.combine_rows(x, groups, &[n, m - r, d])?;
    }

    let h = tape.layer_norm(x, b.ln2.0, b.ln2.1, LN_EPS)?;
    let h = b.fc1.apply(tape, h)?;
    let h = tape.gelu(h);
    let h = b.fc2.apply(tape, h)?;
    tape.add(x, h)
}

/// Merged tokens of each gathered segment.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedTokenSet {
    /// `[N, S, D_v]`.
    pub features: Tensor,
    /// Per segment, per merged token: original token indices.
    pub provenance: Vec<Vec<Vec<usize>>>,
}

impl MergedTokenSet {
    pub fn sizes(&self) -> Vec<Vec<usize>> {
        self.provenance
            .iter()
            .map(|seg| seg.iter().map(Vec::len).collect())
            .collect()
    }
}

/// Run every block over `tokens` (`[N, M, D]`); returns `[N, S, D]` and the
/// provenance of every surviving token.
pub fn merge_on_tape(
    tape: &mut Tape,
    tokens: Var,
    blocks: &[BlockVars],
    cfg: &MergeConfig,
) -> Result<(Var, Vec<Vec<Vec<usize>>>)> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(dim_err("merge", &s, &[cfg.num_blocks]));
    }
    cfg.validate(s[1])?;
    if blocks.len() != cfg.num_blocks {
        return Err(TspmError::Config(format!(
            "{} blocks bound for a {}-block schedule",
            blocks.len(),
            cfg.num_blocks
        )));
    }
    let mut provenance = vec![initial_provenance(s[1]); s[0]];
    let mut x = tokens;
    for (b, &r) in blocks.iter().zip(&cfg.r_schedule) {
        x = block_forward(tape, x, b, cfg.heads, r, cfg.protect_cls, &mut provenance)?;
    }
    Ok((x, provenance))
}

/// Value-level wrapper of [`merge_on_tape`] reading block parameters from
/// `store` under `spatial.block{i}`.
pub fn merge(tokens: &Tensor, store: &ParameterStore, cfg: &MergeConfig) -> Result<MergedTokenSet> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let blocks = (0..cfg.num_blocks)
        .map(|i| BlockVars::bind(&bound, &format!("spatial.block{i}")))
        .collect::<Result<Vec<_>>>()?;
    let x = tape.constant(tokens.clone());
    let (out, provenance) = merge_on_tape(&mut tape, x, &blocks, cfg)?;
    Ok(MergedTokenSet {
        features: tape.value(out).clone(),
        provenance,
    })
}

/// Parameters of the audio/visual aggregation.
#[derive(Debug, Clone, Copy)]
pub struct CrossModalVars {
    pub audio_proj: LinearVars,
    pub self_q: LinearVars,
    pub self_k: LinearVars,
    pub self_v: LinearVars,
    pub audio_q: LinearVars,
    pub audio_k: LinearVars,
    pub audio_v: LinearVars,
}

impl CrossModalVars {
    pub fn bind(bound: &Bound<'_>, prefix: &str) -> Result<Self> {
        let lin = |n: &str| bound.linear(&format!("{prefix}.{n}"));
        Ok(Self {
            audio_proj: lin("audio_proj")?,
            self_q: lin("self_attn.q")?,
            self_k: lin("self_attn.k")?,
            self_v: lin("self_attn.v")?,
            audio_q: lin("audio_attn.q")?,
            audio_k: lin("audio_attn.k")?,
            audio_v: lin("audio_attn.v")?,
        })
    }
}

pub fn init_cross_modal(
    store: &mut ParameterStore,
    prefix: &str,
    audio_dim: usize,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.init_linear(&format!("{prefix}.audio_proj"), audio_dim, d, rng)?;
    for p in ["self_attn", "audio_attn"] {
        for w in ["q", "k", "v"] {
            store.init_linear(&format!("{prefix}.{p}.{w}"), d, d, rng)?;
        }
    }
    Ok(())
}

/// `x + SelfAttn(x) + AudioAttn(proj(audio))` per segment, the audio output
/// broadcast over all merged tokens.
///
/// `merged` is `[N, S, D_v]`, `audio` is `[N, D_a]`. Returns the aggregated
/// tokens and the audio attention weights `[N, 1, S]`.
pub fn cross_modal_aggregate(
    tape: &mut Tape,
    merged: Var,
    audio: Var,
    vars: &CrossModalVars,
) -> Result<(Var, Var)> {
    let (sm, sa) = (tape.shape(merged).to_vec(), tape.shape(audio).to_vec());
    if sm.len() != 3 || sa.len() != 2 {
        return Err(dim_err("cross_modal_aggregate", &sm, &sa));
    }
    if sm[0] != sa[0] {
        return Err(TspmError::Contract(format!(
            "{} merged segments but {} audio rows",
            sm[0], sa[0]
        )));
    }
    let (n, s, d) = (sm[0], sm[1], sm[2]);
    let q = vars.self_q.apply(tape, merged)?;
    let k = vars.self_k.apply(tape, merged)?;
    let v = vars.self_v.apply(tape, merged)?;
    let (self_out, _) = tape.scaled_dot_attention(q, k, v)?;

    let a = vars.audio_proj.apply(tape, audio)?;
    let a = tape.reshape(a, &[n, 1, d])?;
    let q = vars.audio_q.apply(tape, a)?;
    let k = vars.audio_k.apply(tape, merged)?;
    let v = vars.audio_v.apply(tape, merged)?;
    let (audio_out, weights) = tape.scaled_dot_attention(q, k, v)?;
    let audio_out = tape.repeat_axis(audio_out, 1, s)?;

    let out = tape.add(merged, self_out)?;
    Ok((tape.add(out, audio_out)?, weights))
}
