//! Planted-signal data: questions whose answers are only recoverable from a
//! few known segments and tokens of otherwise pure-noise features.
//!
//! For every sample with prompt embedding `u` and answer `c`:
//! - frames of planted segments get `α·u` (the CLS token mirrors the frame);
//! - planted tokens of those segments get `α·v_c`, a unit class pattern;
//! - audio of planted segments gets `α·a_c`, where `a_c` is a fixed random
//!   projection of `v_c` into the audio width (so audio and the sounding
//!   tokens are correlated);
//! - everything else is N(0, σ²) noise.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bundle::{write_bundle, FeatureBundle};
use super::manifest::{write_question_features, Dataset, DatasetManifest, Planted, QASample, Split};
use crate::error::{Result, TspmError};
use crate::prompt::{embed_prompt, slot_fillers, Embedder, Registry, SyntheticEmbedder};
use crate::rng::{component_rng, derive_seed, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// T: segments per video.
    pub segments: usize,
    /// M: tokens per frame including CLS.
    pub tokens: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    /// C: answer vocabulary size.
    pub num_answers: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// k*: planted segments per video.
    pub planted_segments: usize,
    /// Planted tokens per planted segment (never the CLS position).
    pub planted_tokens: usize,
    /// α: signal strength.
    pub signal: f32,
    /// σ: noise standard deviation.
    pub noise: f32,
    /// Template ids to draw questions from; all registry templates when unset.
    pub templates: Option<Vec<String>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            segments: 20,
            tokens: 16,
            audio_dim: 16,
            visual_dim: 32,
            num_answers: 8,
            train: 2000,
            val: 200,
            test: 400,
            planted_segments: 3,
            planted_tokens: 4,
            signal: 2.0,
            noise: 1.0,
            templates: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TspmError::Config(msg));
        if self.segments == 0 || self.tokens < 2 || self.audio_dim == 0 || self.visual_dim == 0 {
            return bad(format!(
                "need T >= 1, M >= 2 and positive widths, got T={} M={} D_a={} D_v={}",
                self.segments, self.tokens, self.audio_dim, self.visual_dim
            ));
        }
        if self.num_answers == 0 {
            return bad("answer vocabulary must be non-empty".into());
        }
        if self.planted_segments > self.segments {
            return bad(format!(
                "cannot plant {} segments in {}",
                self.planted_segments, self.segments
            ));
        }
        if self.planted_tokens > self.tokens - 1 {
            return bad(format!(
                "cannot plant {} tokens among {} non-CLS tokens",
                self.planted_tokens,
                self.tokens - 1
            ));
        }
        if !(self.signal.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            return bad("signal and noise must be finite, noise non-negative".into());
        }
        Ok(())
    }

    fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub splits: Vec<Dataset>,
}

impl GeneratedDataset {
    pub fn split(&self, split: Split) -> &Dataset {
        self.splits
            .iter()
            .find(|d| d.manifest.split == split)
            .expect("generator emits every split")
    }
}

fn unit_normal(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter().map(|x| (x / norm) as f32).collect()
}

fn noise(rng: &mut impl Rng, n: usize, sigma: f32) -> Vec<f32> {
    (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * sigma)
        .collect()
}

fn axpy(dst: &mut [f32], alpha: f32, src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
}

/// Generate train/val/test splits. Same config and seed give identical data.
pub fn generate_synthetic(config: &SynthConfig, seed: u64, registry: &Registry) -> Result<GeneratedDataset> {
    config.validate()?;
    let (t, m, da, dv, c) = (
        config.segments,
        config.tokens,
        config.audio_dim,
        config.visual_dim,
        config.num_answers,
    );
    let template_ids: Vec<String> = match &config.templates {
        Some(ids) => {
            for id in ids {
                registry.get(id)?;
            }
            ids.clone()
        }
        None => registry.entries().map(|e| e.template_id.clone()).collect(),
    };
    if template_ids.is_empty() {
        return Err(TspmError::Config("no templates to draw questions from".into()));
    }

    let mut prng = component_rng(seed, Stream::Synth);
    let class_visual: Vec<Vec<f32>> = (0..c).map(|_| unit_normal(&mut prng, dv)).collect();
    let mixing: Vec<Vec<f32>> = (0..da).map(|_| unit_normal(&mut prng, dv)).collect();
    let class_audio: Vec<Vec<f32>> = class_visual
        .iter()
        .map(|v| {
            let proj: Vec<f64> = mixing
                .iter()
                .map(|row| crate::tensor::kernels::dot(row, v))
                .collect();
            let norm = proj.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            proj.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect();
    let embedder = SyntheticEmbedder {
        seed: derive_seed(seed, "text"),
        dim: dv,
    };
    let vocab: Vec<String> = (0..c).map(|i| format!("answer_{i}")).collect();
    let (alpha, sigma) = (config.signal, config.noise);

    let mut splits = Vec::new();
    for split in Split::ALL {
        let mut samples = Vec::new();
        let mut bundles = std::collections::HashMap::new();
        for i in 0..config.split_size(split) {
            let video_id = format!("{}_{i:05}", split.name());
            let sample_id = format!("{video_id}_q0");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &sample_id));

            let template_id = &template_ids[rng.random_range(0..template_ids.len())];
            let mut bindings = BTreeMap::new();
            for slot in registry.slots(template_id)? {
                let options = slot_fillers(&slot);
                bindings.insert(slot, options[rng.random_range(0..options.len())].to_string());
            }
            let question_text = registry.instantiate(template_id, &bindings)?;
            let matched = registry.match_template(&question_text)?;
            let prompt = registry.construct_prompt(&matched.template_id, &matched.bindings)?;
            let entry = registry.get(&matched.template_id)?;
            let prompt_feature = embed_prompt(&prompt, &embedder)?;
            let question_feature = embedder.embed(&entry.question_pattern)?;
            let answer = i % c;

            let planted_segs: BTreeSet<usize> =
                sample_indices(&mut rng, t, config.planted_segments).into_iter().collect();
            let mut planted_toks = BTreeMap::new();
            for &s in &planted_segs {
                let toks: BTreeSet<usize> = sample_indices(&mut rng, m - 1, config.planted_tokens)
                    .into_iter()
                    .map(|j| j + 1)
                    .collect();
                planted_toks.insert(s, toks);
            }

            let mut audio = noise(&mut rng, t * da, sigma);
            let mut frames = noise(&mut rng, t * dv, sigma);
            let mut tokens = noise(&mut rng, t * m * dv, sigma);
            for seg in 0..t {
                if let Some(toks) = planted_toks.get(&seg) {
                    axpy(&mut frames[seg * dv..(seg + 1) * dv], alpha, &prompt_feature);
                    axpy(&mut audio[seg * da..(seg + 1) * da], alpha, &class_audio[answer]);
                    for &j in toks {
                        let off = (seg * m + j) * dv;
                        axpy(&mut tokens[off..off + dv], alpha, &class_visual[answer]);
                    }
                }
                let off = seg * m * dv;
                tokens[off..off + dv].copy_from_slice(&frames[seg * dv..(seg + 1) * dv]);
            }
            let bundle = FeatureBundle::new(
                video_id.clone(),
                Tensor::new(vec![t, da], audio)?,
                Tensor::new(vec![t, dv], frames)?,
                Tensor::new(vec![t, m, dv], tokens)?,
            )?;
            bundles.insert(video_id.clone(), bundle);
            samples.push(QASample {
                sample_id,
                video_id,
                question_text,
                template_id: matched.template_id,
                question_feature,
                prompt_feature,
                answer,
                question_type: entry.question_type,
                planted: Some(Planted {
                    segment_indices: planted_segs,
                    token_indices: planted_toks,
                }),
            });
        }
        let manifest = DatasetManifest {
            split,
            num_answers: c,
            answer_vocab: vocab.clone(),
            entries: samples.iter().map(QASample::entry).collect(),
        };
        splits.push(Dataset {
            manifest,
            samples,
            bundles,
        });
    }
    Ok(GeneratedDataset {
        config: config.clone(),
        seed,
        splits,
    })
}

/// Write every split to `dir` in the on-disk layout `load_split` reads, plus
/// a `synth.json` echo of the generator config.
pub fn write_dataset(dir: impl AsRef<Path>, data: &GeneratedDataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("bundles"))?;
    for ds in &data.splits {
        let name = ds.manifest.split.name();
        std::fs::write(
            dir.join(format!("{name}.json")),
            serde_json::to_string_pretty(&ds.manifest)?,
        )?;
        write_question_features(dir.join(format!("{name}.avqq")), &ds.samples, data.config.visual_dim)?;
        let mut ids: Vec<&String> = ds.bundles.keys().collect();
        ids.sort();
        for id in ids {
            write_bundle(&ds.bundles[id], dir.join("bundles").join(format!("{id}.avqf")))?;
        }
    }
    let echo = serde_json::json!({ "seed": data.seed, "config": data.config });
    std::fs::write(dir.join("synth.json"), serde_json::to_string_pretty(&echo)?)?;
    Ok(())
}
