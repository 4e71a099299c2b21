//! Answer head: pool the selected audio, frames and aggregated tokens, fuse
//! them into one audio-visual vector, gate it with the question and classify.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result, TspmError};
use crate::optim::{Bound, ParameterStore};
use crate::tensor::{kernels, LinearVars, Tape, Tensor, Var};

/// Reduction used over merged tokens and over selected segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub fc: LinearVars,
    pub classifier: LinearVars,
}

impl FusionVars {
    pub fn bind(bound: &Bound<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            fc: bound.linear(&format!("{prefix}.fc"))?,
            classifier: bound.linear(&format!("{prefix}.classifier"))?,
        })
    }
}

/// FC `[D_a + 2·D_v] -> D_v` (`[D_a + D_v]` without the token stream) and
/// classifier `D_v -> C`.
pub fn init_fusion(
    store: &mut ParameterStore,
    prefix: &str,
    audio_dim: usize,
    visual_dim: usize,
    num_answers: usize,
    with_tokens: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    let width = audio_dim + visual_dim * if with_tokens { 2 } else { 1 };
    store.init_linear(&format!("{prefix}.fc"), width, visual_dim, rng)?;
    store.init_linear(&format!("{prefix}.classifier"), visual_dim, num_answers, rng)
}

fn pool(tape: &mut Tape, x: Var, axis: usize, how: Pool) -> Result<Var> {
    match how {
        Pool::Mean => tape.mean(x, axis),
        Pool::Max => tape.max_axis(x, axis),
    }
}

/// Batched fusion. `audio` is `[B, k, D_a]`, `frames` `[B, k, D_v]`,
/// `aggregated` `[B, k, S, D_v]` when present; returns `F_av` as `[B, D_v]`.
pub fn fuse(
    tape: &mut Tape,
    audio: Var,
    frames: Var,
    aggregated: Option<Var>,
    fc: &LinearVars,
    how: Pool,
    tanh_after_fc: bool,
) -> Result<Var> {
    let (sa, sf) = (tape.shape(audio).to_vec(), tape.shape(frames).to_vec());
    if sa.len() != 3 || sf.len() != 3 || sa[..2] != sf[..2] {
        return Err(dim_err("fuse", &sa, &sf));
    }
    let mut pooled = vec![pool(tape, audio, 1, how)?, pool(tape, frames, 1, how)?];
    if let Some(g) = aggregated {
        let sg = tape.shape(g).to_vec();
        if sg.len() != 4 || sg[..2] != sf[..2] || sg[3] != sf[2] {
            return Err(dim_err("fuse", &sf, &sg));
        }
        let tokens = pool(tape, g, 2, how)?;
        pooled.push(pool(tape, tokens, 1, how)?);
    }
    let joint = tape.concat(&pooled, 1)?;
    let out = fc.apply(tape, joint)?;
    Ok(if tanh_after_fc { tape.tanh(out) } else { out })
}

/// Logits for `e = F_q ⊙ F_av`; both `[B, D_v]`, output `[B, C]`.
pub fn answer_logits(
    tape: &mut Tape,
    fused: Var,
    question: Var,
    classifier: &LinearVars,
) -> Result<Var> {
    let e = tape.mul(question, fused)?;
    classifier.apply(tape, e)
}

/// Probabilities, chosen answer and optional loss for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f32>,
    pub answer: usize,
    pub loss: Option<f32>,
}

/// Index of the largest entry, ties to the lower index.
pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

impl Prediction {
    /// From one row of logits, with the cross-entropy against `label`.
    pub fn from_logits(logits: &[f32], label: Option<usize>) -> Result<Self> {
        let c = logits.len();
        let probabilities = kernels::softmax(logits, 1, c, 1);
        let loss = match label {
            None => None,
            Some(l) if l >= c => {
                return Err(TspmError::Index {
                    what: "answer label",
                    index: l,
                    len: c,
                })
            }
            Some(l) => Some((kernels::log_sum_exp(logits) - logits[l] as f64) as f32),
        };
        Ok(Self {
            answer: argmax(&probabilities),
            probabilities,
            loss,
        })
    }
}

/// Single-sample head on plain values: `fuse` then `answer`.
///
/// `audio` `[k, D_a]`, `frames` `[k, D_v]`, `aggregated` `[k, S, D_v]`,
/// `question` `[D_v]`.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    store: &ParameterStore,
    prefix: &str,
    audio: &Tensor,
    frames: &Tensor,
    aggregated: Option<&Tensor>,
    question: &Tensor,
    how: Pool,
    tanh_after_fc: bool,
    label: Option<usize>,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let vars = FusionVars::bind(&store.bind(&mut tape), prefix)?;
    let batched = |tape: &mut Tape, t: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        tape.constant(t.clone().reshape(&s).expect("same size"))
    };
    let a = batched(&mut tape, audio);
    let f = batched(&mut tape, frames);
    let g = aggregated.map(|g| batched(&mut tape, g));
    let q = batched(&mut tape, question);
    let fav = fuse(&mut tape, a, f, g, &vars.fc, how, tanh_after_fc)?;
    let logits = answer_logits(&mut tape, fav, q, &vars.classifier)?;
    Prediction::from_logits(tape.data(logits), label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_to_lower() {
        assert_eq!(argmax(&[0.25, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[0.3; 3]), 0);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let p = Prediction::from_logits(&[0.0; 4], Some(2)).unwrap();
        for &x in &p.probabilities {
            assert!((x - 0.25).abs() < 1e-7);
        }
        assert!((p.loss.unwrap() - 4f32.ln()).abs() < 1e-6);
        assert_eq!(p.answer, 0);
        assert!(matches!(
            Prediction::from_logits(&[0.0; 4], Some(4)),
            Err(TspmError::Index { .. })
        ));
    }

    #[test]
    fn zero_fc_gives_bias() {
        let mut store = ParameterStore::new();
        store.insert("f.fc.weight", Tensor::zeros(&[5, 2])).unwrap();
        store.insert("f.fc.bias", Tensor::vector(vec![0.3, -0.7])).unwrap();
        let mut tape = Tape::new();
        let fc = store.bind(&mut tape).linear("f.fc").unwrap();
        let a = tape.constant(Tensor::full(&[1, 3, 1], 2.0));
        let f = tape.constant(Tensor::full(&[1, 3, 2], -1.0));
        let g = tape.constant(Tensor::full(&[1, 3, 4, 2], 5.0));
        let out = fuse(&mut tape, a, f, Some(g), &fc, Pool::Mean, false).unwrap();
        assert_eq!(tape.data(out), &[0.3, -0.7]);
        let out = fuse(&mut tape, a, f, Some(g), &fc, Pool::Max, true).unwrap();
        for (&o, b) in tape.data(out).iter().zip([0.3f32, -0.7]) {
            assert!((o - b.tanh()).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_rejects_mismatched_k() {
        let mut tape = Tape::new();
        let fc = LinearVars {
            weight: tape.constant(Tensor::zeros(&[5, 2])),
            bias: tape.constant(Tensor::zeros(&[2])),
        };
        let a = tape.constant(Tensor::zeros(&[1, 3, 1]));
        let f = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let g = tape.constant(Tensor::zeros(&[1, 3, 4, 2]));
        assert!(matches!(
            fuse(&mut tape, a, f, Some(g), &fc, Pool::Mean, true),
            Err(TspmError::Dimension { .. })
        ));
    }
}
