//! Minibatch training with Adam and a step learning-rate schedule, plus
//! evaluation reports and prediction dumps.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Result, TspmError};
use crate::features::{Dataset, QASample};
use crate::fusion::{Pool, Prediction};
use crate::model::{Ablation, Batch, Model, ModelConfig};
use crate::optim::AdamConfig;
use crate::rng::{component_rng, Stream};
use crate::tensor::Tape;

const EVAL_BATCH: usize = 128;

/// Hyperparameters and architecture choices for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub lr_decay: f32,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub top_k: usize,
    pub merge_target: usize,
    pub num_blocks: usize,
    pub heads: usize,
    /// Defaults to twice the visual width.
    pub mlp_hidden: Option<usize>,
    pub query_projection: bool,
    pub pool: Pool,
    pub tanh_after_fc: bool,
    pub protect_cls: bool,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub ablation: BTreeSet<Ablation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.1,
            decay_every: 10,
            batch_size: 64,
            epochs: 30,
            top_k: 10,
            merge_target: 14,
            num_blocks: 1,
            heads: 1,
            mlp_hidden: None,
            query_projection: false,
            pool: Pool::Mean,
            tanh_after_fc: true,
            protect_cls: false,
            grad_clip: None,
            seed: 0,
            ablation: BTreeSet::new(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TspmError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(TspmError::Config("lr_decay must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every == 0 {
            return Err(TspmError::Config(
                "batch_size, epochs and decay_every must be positive".into(),
            ));
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(TspmError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-indexed `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    /// Architecture for data shaped like `data`.
    pub fn model_config(&self, data: &Dataset) -> Result<ModelConfig> {
        let first = data
            .samples
            .first()
            .ok_or_else(|| TspmError::Contract(format!("{} split is empty", data.manifest.split)))?;
        let bundle = data.bundle(first)?;
        let visual_dim = bundle.visual_dim();
        let cfg = ModelConfig {
            segments: bundle.segments(),
            tokens: bundle.tokens_per_frame(),
            audio_dim: bundle.audio_dim(),
            visual_dim,
            num_answers: data.num_answers(),
            top_k: self.top_k,
            merge_target: self.merge_target,
            num_blocks: self.num_blocks,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden.unwrap_or(2 * visual_dim),
            query_projection: self.query_projection,
            pool: self.pool,
            tanh_after_fc: self.tanh_after_fc,
            protect_cls: self.protect_cls,
            ablation: self.ablation.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Model,
    pub best: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Paths written next to a checkpoint `P`.
fn companion(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Write `P` and its architecture at `P.config.json`.
pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    checkpoint::write(path, &model.params)?;
    let mut json = serde_json::to_string_pretty(&model.config)?;
    json.push('\n');
    fs::write(companion(path, ".config.json"), json)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let config: ModelConfig =
        serde_json::from_str(&fs::read_to_string(companion(path, ".config.json"))?)?;
    Model::from_parts(config, checkpoint::read(path)?)
}

/// Path of the best-validation checkpoint saved beside `path`.
pub fn best_path(path: impl AsRef<Path>) -> PathBuf {
    companion(path.as_ref(), ".best")
}

fn nan_report(out: &Path, epoch: usize, batch: usize, samples: &[&QASample], loss: f32) -> Result<()> {
    let ids: Vec<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
    let dump = serde_json::json!({
        "epoch": epoch,
        "batch": batch,
        "loss": loss.to_string(),
        "sample_ids": ids,
    });
    fs::write(companion(out, ".nonfinite.json"), serde_json::to_string_pretty(&dump)?)?;
    Ok(())
}

/// Train on `train`, selecting the best epoch by `val` accuracy (ties to the
/// earlier epoch). With `out`, writes the final checkpoint there, the best
/// one at [`best_path`], and the history as JSON lines at `P.history.jsonl`.
pub fn train(
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.samples.is_empty() {
        return Err(TspmError::Contract("train split is empty".into()));
    }
    let mcfg = cfg.model_config(train)?;
    let mut model = Model::new(mcfg.clone(), cfg.seed)?;
    let mut shuffle = component_rng(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train.samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0, f64::NEG_INFINITY);
    let mut log = match out {
        Some(p) => Some(fs::File::create(companion(p, ".history.jsonl"))?),
        None => None,
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let adam = AdamConfig::with_lr(lr);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut seen) = (0f64, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_dataset(train, chunk, &mcfg)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &batch)?;
            let loss = tape.data(fwd.loss)[0];
            if !loss.is_finite() {
                if let Some(p) = out {
                    let samples: Vec<&QASample> = chunk.iter().map(|&i| &train.samples[i]).collect();
                    nan_report(p, epoch, bi, &samples, loss)?;
                }
                return Err(TspmError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            tape.backward(fwd.loss)?;
            model.params.absorb_grads(&mut tape)?;
            if let Some(c) = cfg.grad_clip {
                model.params.clip_grad_norm(c);
            }
            model.params.adam_step(&adam);
            loss_sum += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_acc = match val {
            Some(v) => Some(accuracy(&model, v)?),
            None => None,
        };
        let score = val_acc.unwrap_or(-(loss_sum / seen as f64));
        if score > best.2 {
            best = (model.clone(), epoch, score);
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        history.push(record);
    }

    if let Some(p) = out {
        save_model(p, &model)?;
        save_model(best_path(p), &best.0)?;
    }
    Ok(TrainOutcome {
        last: model,
        best: best.0,
        best_epoch: best.1,
        history,
    })
}

/// Per-sample outcome of running a model over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub prediction: Prediction,
    pub omega: Vec<usize>,
    pub weights: Vec<f32>,
    pub audio_attention: Option<Vec<Vec<f32>>>,
    pub provenance: Option<Vec<Vec<Vec<usize>>>>,
}

fn check_answers(model: &Model, data: &Dataset) -> Result<()> {
    if model.config.num_answers != data.num_answers() {
        return Err(TspmError::Contract(format!(
            "model predicts {} answers, {} split has {}",
            model.config.num_answers,
            data.manifest.split,
            data.num_answers()
        )));
    }
    Ok(())
}

/// Run `model` over every sample of `data`, in order.
pub fn run_model(model: &Model, data: &Dataset) -> Result<Vec<SampleResult>> {
    let idx: Vec<usize> = (0..data.samples.len()).collect();
    run_samples(model, data, &idx)
}

/// Run `model` over the samples of `data` at `indices`.
pub fn run_samples(model: &Model, data: &Dataset, indices: &[usize]) -> Result<Vec<SampleResult>> {
    check_answers(model, data)?;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = Batch::from_dataset(data, chunk, &model.config)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch)?;
        let logits = tape.data(fwd.logits);
        let c = model.config.num_answers;
        let mut attn = fwd.audio_attention.map(Vec::into_iter);
        let mut prov = fwd.provenance.map(Vec::into_iter);
        for (i, (omega, weights)) in fwd.omega.into_iter().zip(fwd.weights).enumerate() {
            out.push(SampleResult {
                prediction: Prediction::from_logits(
                    &logits[i * c..(i + 1) * c],
                    Some(batch.labels[i]),
                )?,
                omega,
                weights,
                audio_attention: attn.as_mut().and_then(Iterator::next),
                provenance: prov.as_mut().and_then(Iterator::next),
            });
        }
    }
    Ok(out)
}

fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let results = run_model(model, data)?;
    let correct = results
        .iter()
        .zip(&data.samples)
        .filter(|(r, s)| r.prediction.answer == s.answer)
        .count();
    Ok(correct as f64 / data.samples.len().max(1) as f64)
}

/// Accuracy of one table cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl Cell {
    fn add(&mut self, hit: bool) {
        self.count += 1;
        self.correct += usize::from(hit);
    }

    fn finish(&mut self) {
        self.accuracy = if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        };
    }
}

/// How much of the audio attention lands on planted tokens, against the
/// share a uniform distribution would give them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMass {
    /// Segments measured: selected segments that carry planted tokens.
    pub segments: usize,
    pub planted_mass: f64,
    pub uniform_share: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub overall: Cell,
    /// Keyed by modality.
    pub per_type: BTreeMap<String, Cell>,
    /// Keyed by `modality/kind`.
    pub per_subtype: BTreeMap<String, Cell>,
    pub mean_loss: f64,
    /// Mean of `|Ω ∩ planted| / |planted|` over samples with planted truth.
    pub planted_recall: Option<f64>,
    pub audio_attention: Option<AttentionMass>,
    pub config: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seconds: Option<f64>,
}

/// Mass of one segment's audio attention on `planted` original tokens; each
/// merged token's weight is spread evenly over its constituents.
pub fn planted_mass(weights: &[f32], provenance: &[Vec<usize>], planted: &BTreeSet<usize>) -> f64 {
    weights
        .iter()
        .zip(provenance)
        .map(|(&w, p)| {
            let hits = p.iter().filter(|i| planted.contains(i)).count();
            w as f64 * hits as f64 / p.len() as f64
        })
        .sum()
}

/// Score `results` (from [`run_model`]) against `data`.
pub fn report(model: &Model, data: &Dataset, results: &[SampleResult]) -> Result<EvalReport> {
    if results.len() != data.samples.len() {
        return Err(TspmError::Contract(format!(
            "{} results for {} samples",
            results.len(),
            data.samples.len()
        )));
    }
    let mut overall = Cell::default();
    let mut per_type: BTreeMap<String, Cell> = BTreeMap::new();
    let mut per_subtype: BTreeMap<String, Cell> = BTreeMap::new();
    let mut loss = 0f64;
    let (mut recall_sum, mut recall_n) = (0f64, 0usize);
    let (mut mass, mut share, mut mass_n) = (0f64, 0f64, 0usize);
    for (r, s) in results.iter().zip(&data.samples) {
        let hit = r.prediction.answer == s.answer;
        overall.add(hit);
        per_type
            .entry(s.question_type.modality.to_string())
            .or_default()
            .add(hit);
        per_subtype.entry(s.question_type.to_string()).or_default().add(hit);
        loss += r.prediction.loss.unwrap_or(0.0) as f64;
        let Some(planted) = &s.planted else { continue };
        if !planted.segment_indices.is_empty() {
            let found = r
                .omega
                .iter()
                .filter(|t| planted.segment_indices.contains(t))
                .count();
            recall_sum += found as f64 / planted.segment_indices.len() as f64;
            recall_n += 1;
        }
        if let (Some(attn), Some(prov)) = (&r.audio_attention, &r.provenance) {
            for (pos, &seg) in r.omega.iter().enumerate() {
                match planted.token_indices.get(&seg) {
                    Some(toks) if !toks.is_empty() => {
                        mass += planted_mass(&attn[pos], &prov[pos], toks);
                        share += toks.len() as f64 / model.config.tokens as f64;
                        mass_n += 1;
                    }
                    _ => {}
                }
            }
        }
    }
    overall.finish();
    per_type.values_mut().for_each(Cell::finish);
    per_subtype.values_mut().for_each(Cell::finish);
    let n = results.len().max(1) as f64;
    Ok(EvalReport {
        split: data.manifest.split.to_string(),
        overall,
        per_type,
        per_subtype,
        mean_loss: loss / n,
        planted_recall: (recall_n > 0).then(|| recall_sum / recall_n as f64),
        audio_attention: (mass_n > 0).then(|| AttentionMass {
            segments: mass_n,
            planted_mass: mass / mass_n as f64,
            uniform_share: share / mass_n as f64,
            ratio: mass / share,
        }),
        config: model.config.clone(),
        seconds: None,
    })
}

/// Run and score `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    let results = run_model(model, data)?;
    report(model, data, &results)
}

/// One row of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub answer_index: usize,
    pub answer_string: String,
    pub p: Vec<f32>,
    pub omega: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f32>,
}

pub fn prediction_records(data: &Dataset, results: &[SampleResult]) -> Vec<PredictionRecord> {
    results
        .iter()
        .zip(&data.samples)
        .map(|(r, s)| PredictionRecord {
            sample_id: s.sample_id.clone(),
            answer_index: r.prediction.answer,
            answer_string: data
                .manifest
                .answer_vocab
                .get(r.prediction.answer)
                .cloned()
                .unwrap_or_default(),
            p: r.prediction.probabilities.clone(),
            omega: r.omega.clone(),
            loss: r.prediction.loss,
        })
        .collect()
}
