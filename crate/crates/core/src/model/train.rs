use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::network::{Model, Sample};
use super::params::round_f32;
use super::tensor::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Fraction of `total_steps` spent ramping the rate linearly from zero.
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_fraction: 0.05,
            total_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..=1.0).contains(&self.warmup_fraction)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings: {self:?}"
            )))
        }
    }

    /// Learning rate applied at 0-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = (self.warmup_fraction * self.total_steps as f64).ceil() as u64;
        if warmup == 0 || step >= warmup {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / warmup as f64
        }
    }
}

/// Adam moments, stored `f32`-exact like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros = || {
            model
                .params()
                .tensors()
                .iter()
                .map(|t| Matrix::zeros(t.rows, t.cols))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub state: AdamState,
    /// Token used as the teacher-forcing begin marker.
    pub begin_token: u32,
    frozen: Vec<bool>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, begin_token: u32) -> Result<Self> {
        config.validate()?;
        let state = AdamState::new(&model);
        Self::resume(model, config, state, begin_token)
    }

    pub fn resume(
        model: Model,
        config: TrainConfig,
        state: AdamState,
        begin_token: u32,
    ) -> Result<Self> {
        config.validate()?;
        if state.m.len() != model.params().tensors().len() || state.v.len() != state.m.len() {
            return Err(Error::Config(
                "optimizer state does not match model layout".into(),
            ));
        }
        let mut frozen = vec![false; model.params().tensors().len()];
        if config.freeze_backbone {
            for id in model.backbone_params() {
                frozen[id.0] = true;
            }
        }
        Ok(Self {
            model,
            config,
            state,
            begin_token,
            frozen,
        })
    }

    /// One optimizer step on `batch`. A non-finite loss or gradient leaves the parameters
    /// untouched and returns a numeric error carrying diagnostics.
    pub fn step(&mut self, batch: &[Sample]) -> Result<StepReport> {
        let (loss, mut grads) = self.model.batch_loss_and_grads(batch, self.begin_token)?;
        let grad_norm = grads.global_norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numeric(self.diagnostics(loss, &grads)));
        }
        if let Some(clip) = self.config.clip_norm {
            if grad_norm > clip {
                let s = clip / grad_norm;
                grads.tensors.iter_mut().for_each(|g| g.scale(s));
            }
        }
        let step = self.state.step;
        let lr = self.config.lr_at(step);
        let t = (step + 1) as i32;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let params = self.model.params_mut().tensors_mut();
        for (i, g) in grads.tensors.iter().enumerate() {
            if self.frozen[i] {
                continue;
            }
            let (m, v, p) = (&mut self.state.m[i], &mut self.state.v[i], &mut params[i]);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = b1 * m.data[j] + (1.0 - b1) * gj;
                v.data[j] = b2 * v.data[j] + (1.0 - b2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            round_f32(m);
            round_f32(v);
            round_f32(p);
        }
        self.state.step += 1;
        Ok(StepReport {
            step: self.state.step,
            loss,
            lr,
            grad_norm,
        })
    }

    fn diagnostics(&self, loss: f64, grads: &Gradients) -> String {
        let store = self.model.params();
        let mut bad: Vec<String> = store
            .ids()
            .filter(|&id| !store.get(id).all_finite() || !grads.get(id).all_finite())
            .map(|id| store.name(id).to_string())
            .collect();
        bad.truncate(8);
        format!(
            "non-finite loss {loss} at step {}; parameter norm {:.4e}; non-finite tensors: [{}]",
            self.state.step,
            store
                .tensors()
                .iter()
                .map(Matrix::norm_sq)
                .sum::<f64>()
                .sqrt(),
            bad.join(", ")
        )
    }
}
