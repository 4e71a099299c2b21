//! Temporal perception: score every segment against the prompt and keep the
//! `top_k` best, in chronological order.

use crate::error::{dim_err, Result, TspmError};
use crate::tensor::{LinearVars, Tape, Tensor, Var};

/// Attention of a prompt over segments: `softmax(q · Key(frames)ᵀ / √d)`.
///
/// `prompt` is `[D]` with `frames` `[T, D_v]` (one video), or `[B, D]` with
/// `frames` `[B, T, D_v]`. The result is `[T]` or `[B, T]`. Without
/// `query_proj` the raw prompt is the query, so it must have the key width.
pub fn attention_weights(
    tape: &mut Tape,
    prompt: Var,
    frames: Var,
    key_proj: LinearVars,
    query_proj: Option<LinearVars>,
) -> Result<Var> {
    let (ps, fs) = (tape.shape(prompt).to_vec(), tape.shape(frames).to_vec());
    let single = fs.len() == 2;
    let (b, t) = match (ps.len(), fs.len()) {
        (1, 2) => (1, fs[0]),
        (2, 3) if ps[0] == fs[0] => (fs[0], fs[1]),
        _ => return Err(dim_err("attention_weights", &ps, &fs)),
    };
    let keys = key_proj.apply(tape, frames)?;
    let d = *tape.shape(keys).last().expect("rank >= 1");
    let query = match query_proj {
        Some(q) => q.apply(tape, prompt)?,
        None => prompt,
    };
    let qd = *tape.shape(query).last().expect("rank >= 1");
    if qd != d {
        return Err(dim_err("attention_weights", &[qd], &[d]));
    }
    let keys = tape.reshape(keys, &[b, t, d])?;
    let query = tape.reshape(query, &[b, d, 1])?;
    let scores = tape.matmul(keys, query)?;
    let scores = tape.reshape(scores, &[b, t])?;
    let scores = tape.scale(scores, 1.0 / (d as f32).sqrt());
    let w = tape.softmax(scores, 1)?;
    if single {
        tape.reshape(w, &[t])
    } else {
        Ok(w)
    }
}

/// Indices of the `k` largest weights, ties to the lower index, returned in
/// ascending (chronological) order.
pub fn select_topk(weights: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > weights.len() {
        return Err(TspmError::Config(format!(
            "top_k = {k} must be in 1..={}",
            weights.len()
        )));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut omega = order[..k].to_vec();
    omega.sort_unstable();
    Ok(omega)
}

/// Outcome of temporal selection for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSelection {
    /// Selected segment indices, ascending.
    pub omega: Vec<usize>,
    /// Full attention vector over all segments.
    pub weights: Vec<f32>,
    /// `[k, D_a]`, row `i` copied from `audio[omega[i]]`.
    pub selected_audio: Tensor,
    /// `[k, D_v]`, row `i` copied from `frames[omega[i]]`.
    pub selected_frames: Tensor,
}

impl TemporalSelection {
    /// Positions within `omega`, strongest weight first.
    pub fn rank_order(&self) -> Vec<usize> {
        let mut pos: Vec<usize> = (0..self.omega.len()).collect();
        pos.sort_by(|&a, &b| {
            self.weights[self.omega[b]]
                .total_cmp(&self.weights[self.omega[a]])
                .then(a.cmp(&b))
        });
        pos
    }
}

/// Select the top `k` segments and copy out their audio and frame features.
pub fn select(weights: &[f32], audio: &Tensor, frames: &Tensor, k: usize) -> Result<TemporalSelection> {
    let t = weights.len();
    if audio.rank() != 2 || frames.rank() != 2 || audio.shape()[0] != t || frames.shape()[0] != t {
        return Err(dim_err("select", audio.shape(), frames.shape()));
    }
    let omega = select_topk(weights, k)?;
    let gather = |x: &Tensor| -> Result<Tensor> {
        let data = omega.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
        Tensor::new(vec![k, x.shape()[1]], data)
    };
    Ok(TemporalSelection {
        selected_audio: gather(audio)?,
        selected_frames: gather(frames)?,
        omega,
        weights: weights.to_vec(),
    })
}
