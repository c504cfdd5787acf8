use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;
pub const DEFAULT_BASE_LR: f64 = 0.05;
pub const DEFAULT_POLY_POWER: f64 = 0.9;

/// SGD with classical momentum and L2 weight decay folded into the gradient:
///
/// ```text
/// v ← μ·v + (g + λ·θ)
/// θ ← θ − lr·v
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub step: u64,
    buffers: Vec<Tensor>,
}

impl OptState {
    /// Zero momentum buffers shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, momentum: f64, weight_decay: f64) -> Self {
        OptState {
            momentum,
            weight_decay,
            step: 0,
            buffers: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    /// Apply one update. Every gradient is checked before any parameter
    /// moves, so a non-finite gradient leaves parameters and buffers intact.
    pub fn sgd_step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &[&Tensor],
        lr: f64,
    ) -> Result<()> {
        let mut params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        if params.len() != self.buffers.len() || grads.len() != self.buffers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters and {} gradients for {} buffers",
                params.len(),
                grads.len(),
                self.buffers.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::InvalidShape(format!(
                    "gradient {:?} for parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    step: self.step,
                    param: name.to_string(),
                    norm: g.norm(),
                });
            }
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (((_, p), g), v) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + (gi + wd * *theta);
                *theta -= lr * *vi;
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Poly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_steps: u64,
    pub power: f64,
}

impl Schedule {
    /// Learning rate at `step`; steps past `total_steps` are clamped.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        match self.kind {
            ScheduleKind::Cosine => self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
            ScheduleKind::Poly => self.base_lr * (1.0 - frac).powf(self.power),
        }
    }
}
