//! The full network: temporal selection, spatial merging with audio
//! attention, and the answer head, run over a minibatch on one tape.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TspmError};
use crate::features::{Dataset, QASample};
use crate::fusion::{self, FusionVars, Pool};
use crate::optim::ParameterStore;
use crate::rng::{component_rng, Stream};
use crate::spatial::{self, BlockVars, CrossModalVars, MergeConfig};
use crate::temporal;
use crate::tensor::{Tape, Tensor, Var};

/// A component switched off for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Uniform segment weights; the first `top_k` segments are used.
    NoTpm,
    /// No token stream: fusion sees only the selected audio and frames.
    NoSpm,
    /// Every segment is selected.
    NoTpc,
    /// Segments are keyed by the question feature instead of the prompt.
    NoQprompt,
    /// Transformer blocks run without merging.
    NoMerge,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoTpm,
        Ablation::NoSpm,
        Ablation::NoTpc,
        Ablation::NoQprompt,
        Ablation::NoMerge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoTpm => "no_tpm",
            Ablation::NoSpm => "no_spm",
            Ablation::NoTpc => "no_tpc",
            Ablation::NoQprompt => "no_qprompt",
            Ablation::NoMerge => "no_merge",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = TspmError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| TspmError::Config(format!("unknown ablation {s:?}")))
    }
}

/// Architecture and data dimensions. Everything needed to rebuild a model
/// from its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub segments: usize,
    pub tokens: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub num_answers: usize,
    pub top_k: usize,
    pub merge_target: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub query_projection: bool,
    pub pool: Pool,
    pub tanh_after_fc: bool,
    pub protect_cls: bool,
    pub ablation: BTreeSet<Ablation>,
}

impl ModelConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablation.contains(&a)
    }

    /// Segments actually selected.
    pub fn effective_top_k(&self) -> usize {
        if self.has(Ablation::NoTpc) {
            self.segments
        } else {
            self.top_k
        }
    }

    /// The merge schedule, all zeros without merging.
    pub fn merge_config(&self) -> Result<MergeConfig> {
        let mut cfg = if self.has(Ablation::NoMerge) {
            MergeConfig {
                num_blocks: self.num_blocks,
                r_schedule: vec![0; self.num_blocks],
                heads: self.heads,
                protect_cls: false,
            }
        } else {
            MergeConfig::even(self.tokens, self.merge_target, self.num_blocks, self.heads)?
        };
        cfg.protect_cls = self.protect_cls;
        cfg.validate(self.tokens)?;
        Ok(cfg)
    }

    /// Merged tokens per segment.
    pub fn effective_tokens(&self) -> usize {
        if self.has(Ablation::NoMerge) {
            self.tokens
        } else {
            self.merge_target
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("segments", self.segments),
            ("tokens", self.tokens),
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
            ("num_answers", self.num_answers),
            ("num_blocks", self.num_blocks),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(TspmError::Config(format!("{name} must be positive")));
        }
        if self.top_k == 0 || self.top_k > self.segments {
            return Err(TspmError::Config(format!(
                "top_k = {} must be in 1..={}",
                self.top_k, self.segments
            )));
        }
        if self.visual_dim % self.heads != 0 {
            return Err(TspmError::Config(format!(
                "{} heads do not divide visual_dim {}",
                self.heads, self.visual_dim
            )));
        }
        for (a, b) in [
            (Ablation::NoTpm, Ablation::NoTpc),
            (Ablation::NoTpm, Ablation::NoQprompt),
            (Ablation::NoSpm, Ablation::NoMerge),
        ] {
            if self.has(a) && self.has(b) {
                return Err(TspmError::Config(format!("ablations {a} and {b} conflict")));
            }
        }
        if !self.has(Ablation::NoSpm) {
            self.merge_config()?;
        }
        Ok(())
    }

    /// Parameter names and shapes this configuration expects.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut store = ParameterStore::new();
        init_parameters(self, &mut store, 0)?;
        Ok(store
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect())
    }
}

fn init_parameters(cfg: &ModelConfig, store: &mut ParameterStore, seed: u64) -> Result<()> {
    let mut rng = component_rng(seed, Stream::Init);
    let (da, dv) = (cfg.audio_dim, cfg.visual_dim);
    if !cfg.has(Ablation::NoTpm) {
        store.init_linear("temporal.key", dv, dv, &mut rng)?;
        if cfg.query_projection {
            store.init_linear("temporal.query", dv, dv, &mut rng)?;
        }
    }
    if !cfg.has(Ablation::NoSpm) {
        for i in 0..cfg.num_blocks {
            spatial::init_block(store, &format!("spatial.block{i}"), dv, cfg.mlp_hidden, &mut rng)?;
        }
        spatial::init_cross_modal(store, "spatial", da, dv, &mut rng)?;
    }
    fusion::init_fusion(
        store,
        "fusion",
        da,
        dv,
        cfg.num_answers,
        !cfg.has(Ablation::NoSpm),
        &mut rng,
    )
}

/// Stacked inputs for a minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, D_v]`: the feature segments are keyed with.
    pub keys: Tensor,
    /// `[B, D_v]`.
    pub questions: Tensor,
    /// `[B, T, D_a]`.
    pub audio: Tensor,
    /// `[B, T, D_v]`.
    pub frames: Tensor,
    /// `[B, T, M, D_v]`.
    pub tokens: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather `indices` of `data`. Samples are keyed by their prompt, or by
    /// the question under the `no_qprompt` ablation.
    pub fn from_dataset(data: &Dataset, indices: &[usize], cfg: &ModelConfig) -> Result<Self> {
        if indices.is_empty() {
            return Err(TspmError::Contract("empty batch".into()));
        }
        let samples: Vec<&QASample> = indices
            .iter()
            .map(|&i| {
                data.samples.get(i).ok_or(TspmError::Index {
                    what: "sample",
                    index: i,
                    len: data.samples.len(),
                })
            })
            .collect::<Result<_>>()?;
        let (t, m, da, dv) = (cfg.segments, cfg.tokens, cfg.audio_dim, cfg.visual_dim);
        let b = samples.len();
        let mut keys = Vec::with_capacity(b * dv);
        let mut questions = Vec::with_capacity(b * dv);
        let mut audio = Vec::with_capacity(b * t * da);
        let mut frames = Vec::with_capacity(b * t * dv);
        let mut tokens = Vec::with_capacity(b * t * m * dv);
        let mut labels = Vec::with_capacity(b);
        for s in samples {
            let bundle = data.bundle(s)?;
            if bundle.audio.shape() != [t, da]
                || bundle.frames.shape() != [t, dv]
                || bundle.tokens.shape() != [t, m, dv]
            {
                return Err(TspmError::Contract(format!(
                    "bundle {} does not match the model dimensions",
                    bundle.video_id
                )));
            }
            if s.question_feature.len() != dv || s.prompt_feature.len() != dv {
                return Err(TspmError::Contract(format!(
                    "sample {} has text features of the wrong width",
                    s.sample_id
                )));
            }
            if cfg.has(Ablation::NoQprompt) {
                keys.extend_from_slice(&s.question_feature);
            } else {
                keys.extend_from_slice(&s.prompt_feature);
            }
            questions.extend_from_slice(&s.question_feature);
            audio.extend_from_slice(bundle.audio.data());
            frames.extend_from_slice(bundle.frames.data());
            tokens.extend_from_slice(bundle.tokens.data());
            labels.push(s.answer);
        }
        Ok(Self {
            keys: Tensor::new(vec![b, dv], keys)?,
            questions: Tensor::new(vec![b, dv], questions)?,
            audio: Tensor::new(vec![b, t, da], audio)?,
            frames: Tensor::new(vec![b, t, dv], frames)?,
            tokens: Tensor::new(vec![b, t, m, dv], tokens)?,
            labels,
        })
    }
}

/// Everything a forward pass produces besides the graph itself.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, C]`.
    pub logits: Var,
    /// Mean cross-entropy over the batch.
    pub loss: Var,
    /// Per sample: selected segments, ascending.
    pub omega: Vec<Vec<usize>>,
    /// Per sample: segment weights (uniform without temporal perception).
    pub weights: Vec<Vec<f32>>,
    /// Per sample, per selected segment: audio attention over merged tokens.
    pub audio_attention: Option<Vec<Vec<Vec<f32>>>>,
    /// Per sample, per selected segment: original tokens behind each merged token.
    pub provenance: Option<Vec<Vec<Vec<Vec<usize>>>>>,
}

/// Parameters plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    /// Fresh parameters drawn from the init stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        init_parameters(&config, &mut params, seed)?;
        Ok(Self { config, params })
    }

    /// Pair loaded parameters with a configuration, checking every name and
    /// shape.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes()?;
        if expected.len() != params.len() {
            return Err(TspmError::Contract(format!(
                "checkpoint has {} parameters, configuration expects {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(TspmError::Contract(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Record the forward pass for `batch` on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Forward> {
        let cfg = &self.config;
        let bound = self.params.bind(tape);
        let (b, t, m, da, dv) = (
            batch.len(),
            cfg.segments,
            cfg.tokens,
            cfg.audio_dim,
            cfg.visual_dim,
        );
        let k = cfg.effective_top_k();

        let keys = tape.constant(batch.keys.clone());
        let frames = tape.constant(batch.frames.clone());
        let audio_flat = tape.constant(batch.audio.clone().reshape(&[b * t, da])?);
        let frames_flat = tape.constant(batch.frames.clone().reshape(&[b * t, dv])?);
        let tokens_flat = tape.constant(batch.tokens.clone().reshape(&[b * t, m * dv])?);

        // Temporal perception.
        let (omega, weights, weight_var) = if cfg.has(Ablation::NoTpm) {
            let omega: Vec<usize> = (0..k).collect();
            (vec![omega; b], vec![vec![1.0 / t as f32; t]; b], None)
        } else {
            let key = bound.linear("temporal.key")?;
            let query = if cfg.query_projection {
                Some(bound.linear("temporal.query")?)
            } else {
                None
            };
            let w = temporal::attention_weights(tape, keys, frames, key, query)?;
            let values = tape.data(w).to_vec();
            let rows: Vec<Vec<f32>> = values.chunks(t).map(<[f32]>::to_vec).collect();
            let omega = rows
                .iter()
                .map(|r| temporal::select_topk(r, k))
                .collect::<Result<Vec<_>>>()?;
            (omega, rows, Some(w))
        };
        let rows: Vec<usize> = omega
            .iter()
            .enumerate()
            .flat_map(|(i, o)| o.iter().map(move |&j| i * t + j))
            .collect();
        let selected_w = match weight_var {
            Some(w) => {
                let w = tape.reshape(w, &[b * t])?;
                Some(tape.gather_rows(w, &rows)?)
            }
            None => None,
        };
        let gather = |tape: &mut Tape, x: Var| -> Result<Var> {
            let g = tape.gather_rows(x, &rows)?;
            match selected_w {
                Some(w) => tape.straight_through(g, w),
                None => Ok(g),
            }
        };
        let sel_audio = gather(tape, audio_flat)?;
        let sel_frames = gather(tape, frames_flat)?;
        let sel_tokens = if cfg.has(Ablation::NoSpm) {
            None
        } else {
            Some(gather(tape, tokens_flat)?)
        };

        // Spatial perception.
        let (aggregated, audio_attention, provenance) = match sel_tokens {
            None => (None, None, None),
            Some(tok) => {
                let tok = tape.reshape(tok, &[b * k, m, dv])?;
                let merge_cfg = cfg.merge_config()?;
                let blocks = (0..cfg.num_blocks)
                    .map(|i| BlockVars::bind(&bound, &format!("spatial.block{i}")))
                    .collect::<Result<Vec<_>>>()?;
                let (merged, prov) = spatial::merge_on_tape(tape, tok, &blocks, &merge_cfg)?;
                let cross = CrossModalVars::bind(&bound, "spatial")?;
                let (agg, attn) = spatial::cross_modal_aggregate(tape, merged, sel_audio, &cross)?;
                let s = cfg.effective_tokens();
                let agg = tape.reshape(agg, &[b, k, s, dv])?;
                let attn: Vec<Vec<Vec<f32>>> = tape
                    .data(attn)
                    .chunks(k * s)
                    .map(|sample| sample.chunks(s).map(<[f32]>::to_vec).collect())
                    .collect();
                let mut prov_iter = prov.into_iter();
                let prov = (0..b).map(|_| prov_iter.by_ref().take(k).collect()).collect();
                (Some(agg), Some(attn), Some(prov))
            }
        };

        // Answer head.
        let head = FusionVars::bind(&bound, "fusion")?;
        let sel_audio = tape.reshape(sel_audio, &[b, k, da])?;
        let sel_frames = tape.reshape(sel_frames, &[b, k, dv])?;
        let fused = fusion::fuse(
            tape,
            sel_audio,
            sel_frames,
            aggregated,
            &head.fc,
            cfg.pool,
            cfg.tanh_after_fc,
        )?;
        let questions = tape.constant(batch.questions.clone());
        let logits = fusion::answer_logits(tape, fused, questions, &head.classifier)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        Ok(Forward {
            logits,
            loss,
            omega,
            weights,
            audio_attention,
            provenance,
        })
    }
}
