//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TspmError};
use crate::tensor::{LinearVars, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub updated: usize,
    pub skipped: Vec<String>,
}

/// Trainable parameters keyed by path (e.g. `spatial.block0.attn.q.weight`),
/// plus the optimizer state that goes with them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TspmError::Contract(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    /// Insert a `[fan_in, fan_out]` weight and `[fan_out]` bias drawn from
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init_linear(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(format!("{prefix}.weight"), Tensor::new(vec![fan_in, fan_out], w)?)?;
        self.insert(format!("{prefix}.bias"), Tensor::new(vec![fan_out], b)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| TspmError::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TspmError::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }

    /// Restore optimizer state, e.g. from a checkpoint.
    pub fn set_optimizer_state(
        &mut self,
        step: u64,
        moments: BTreeMap<String, Moments>,
    ) -> Result<()> {
        for (name, mo) in &moments {
            let n = self.get(name)?.numel();
            if mo.m.len() != n || mo.v.len() != n {
                return Err(TspmError::Contract(format!(
                    "moment buffers for {name} do not match its {n} elements"
                )));
            }
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }

    /// Record every parameter on `tape` and return handles by name.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.as_str(), tape.param(k, t)))
            .collect();
        Bound { vars }
    }

    /// Move gradients accumulated on `tape` into the matching parameters.
    pub fn absorb_grads(&mut self, tape: &mut Tape) -> Result<()> {
        for (name, g) in tape.take_param_grads() {
            self.get_mut(&name)?.accumulate_grad(&g);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Global L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = (max_norm / norm) as f32;
            for t in self.params.values_mut() {
                if let Some(g) = t.take_grad() {
                    let scaled: Vec<f32> = g.iter().map(|x| x * s).collect();
                    t.accumulate_grad(&scaled);
                }
            }
        }
        norm
    }

    /// One bias-corrected Adam update over every parameter with a gradient;
    /// gradients are cleared afterwards. Parameters without a gradient are
    /// left alone and reported.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> StepReport {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let mut report = StepReport::default();
        for (name, param) in self.params.iter_mut() {
            let Some(grad) = param.take_grad() else {
                report.skipped.push(name.clone());
                continue;
            };
            let n = grad.len();
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (i, w) in param.data_mut().iter_mut().enumerate() {
                let g = grad[i] as f64;
                let m = b1 * mo.m[i] as f64 + (1.0 - b1) * g;
                let v = b2 * mo.v[i] as f64 + (1.0 - b2) * g * g;
                mo.m[i] = m as f32;
                mo.v[i] = v as f32;
                let delta = cfg.lr as f64 * (m / bc1) / ((v / bc2).sqrt() + cfg.eps as f64);
                if delta != 0.0 {
                    *w = (*w as f64 - delta) as f32;
                }
            }
            report.updated += 1;
        }
        report
    }
}

/// Tape handles for every parameter of a store.
pub struct Bound<'a> {
    vars: BTreeMap<&'a str, crate::tensor::Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<crate::tensor::Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TspmError::Contract(format!("unknown parameter {name}")))
    }

    /// `<prefix>.weight` and `<prefix>.bias` as a linear layer.
    pub fn linear(&self, prefix: &str) -> Result<LinearVars> {
        Ok(LinearVars {
            weight: self.get(&format!("{prefix}.weight"))?,
            bias: self.get(&format!("{prefix}.bias"))?,
        })
    }
}
