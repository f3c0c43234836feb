use super::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear warmup from zero to the base rate over the first
/// `ceil(ratio * total)` steps, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub warmup_steps: usize,
}

impl WarmupSchedule {
    pub fn new(total_steps: usize, ratio: f64) -> Self {
        Self {
            warmup_steps: (ratio * total_steps as f64).ceil() as usize,
        }
    }

    /// Multiplier applied to the base learning rate at zero-based `step`.
    pub fn factor(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            1.0
        } else {
            (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub lr_factor: f64,
}

/// Adam with global-norm clipping and per-group learning rates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub lr_encoder: f64,
    pub lr_scm: f64,
    pub clip: f64,
    pub schedule: WarmupSchedule,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(
        store: &ParamStore,
        lr_encoder: f64,
        lr_scm: f64,
        clip: f64,
        schedule: WarmupSchedule,
    ) -> Self {
        let zeros = |store: &ParamStore| {
            store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect::<Vec<_>>()
        };
        Self {
            config: AdamConfig::default(),
            lr_encoder,
            lr_scm,
            clip,
            schedule,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// Clips the stored gradients to the global norm bound and applies one
    /// Adam update at zero-based `step`. Gradients are left untouched; callers
    /// zero them between steps.
    pub fn clip_and_step(&mut self, store: &mut ParamStore, step: usize) -> Result<StepStats> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} state slots for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        let mut sq = 0.0;
        for (_, p) in store.iter() {
            if let Some(bad) = p.grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of parameter {} is {bad}",
                    p.name
                )));
            }
            sq += p.grad.iter().map(|g| g * g).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip_scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        let lr_factor = self.schedule.factor(step);
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = (step + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let lr = lr_factor
                * match p.group {
                    ParamGroup::Encoder => self.lr_encoder,
                    ParamGroup::Scm => self.lr_scm,
                };
            for (((w, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g * clip_scale;
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clip_scale,
            lr_factor,
        })
    }
}
