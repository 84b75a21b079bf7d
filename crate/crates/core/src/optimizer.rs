//! AdamW with ESS-guided step scaling.
//!
//! The step size is the scheduled rate times `sqrt(rho_off / rho_on)`, where
//! `rho_off` is the current batch's ESS ratio and `rho_on` an on-policy
//! reference. The gradient is clipped to `clip_norm` first, then the scaled step
//! is applied with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoOnMode {
    /// Measure from synchronous steps before training.
    Estimate,
    /// Use `rho_on_value` verbatim.
    Override,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    /// Steps at the plateau before decay starts (after warmup).
    pub stable_steps: u64,
    /// Linear decay to zero over this many steps; 0 keeps the plateau forever.
    pub decay_steps: u64,
    pub rho_on_mode: RhoOnMode,
    pub rho_on_value: Option<f64>,
    /// Synchronous steps averaged when estimating `rho_on`.
    pub rho_on_steps: u32,
    pub ess_scaling: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-2,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            warmup_steps: 0,
            stable_steps: 0,
            decay_steps: 0,
            rho_on_mode: RhoOnMode::Estimate,
            rho_on_value: None,
            rho_on_steps: 1,
            ess_scaling: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.lr) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::config("optimizer.betas", "each beta must lie in [0, 1)"));
        }
        if !pos(self.eps) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be >= 0"));
        }
        if !pos(self.clip_norm) {
            return Err(Error::config("optimizer.clip_norm", "must be positive"));
        }
        if self.rho_on_steps == 0 {
            return Err(Error::config("optimizer.rho_on_steps", "must be >= 1"));
        }
        match (self.rho_on_mode, self.rho_on_value) {
            (RhoOnMode::Override, None) => {
                return Err(Error::config(
                    "optimizer.rho_on_value",
                    "required when rho_on_mode = \"override\"",
                ))
            }
            (_, Some(v)) if !(v > 0.0 && v <= 1.0) => {
                return Err(Error::config("optimizer.rho_on_value", "must lie in (0, 1]"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Warmup-stable-decay rate at `step` (0-based).
    pub fn scheduled_lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let after = step - self.warmup_steps;
        if self.decay_steps == 0 || after < self.stable_steps {
            return self.lr;
        }
        let into = (after - self.stable_steps) as f64;
        self.lr * (1.0 - into / self.decay_steps as f64).max(0.0)
    }
}

/// `lr * sqrt(rho_off / rho_on)`.
pub fn scaled_lr(rho_off: f64, rho_on: f64, lr: f64) -> f64 {
    lr * (rho_off / rho_on).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub cfg: OptimizerConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Applied updates so far.
    pub step: u64,
    pub rho_on: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied {
        lr_eff: f64,
        pre_clip_norm: f64,
    },
    /// Non-finite gradient; parameters and moments are untouched.
    Skipped {
        reason: String,
    },
}

impl OptState {
    pub fn new(cfg: OptimizerConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        let rho_on = match cfg.rho_on_mode {
            RhoOnMode::Override => cfg.rho_on_value,
            RhoOnMode::Estimate => None,
        };
        Ok(OptState {
            cfg,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            rho_on,
        })
    }

    pub fn set_rho_on(&mut self, rho_on: f64) -> Result<()> {
        if !(rho_on > 0.0 && rho_on <= 1.0) {
            return Err(Error::config(
                "optimizer.rho_on_value",
                format!("{rho_on} is outside (0, 1]"),
            ));
        }
        self.rho_on = Some(rho_on);
        Ok(())
    }

    pub fn effective_lr(&self, rho_off: f64) -> Result<f64> {
        let lr = self.cfg.scheduled_lr(self.step);
        if !self.cfg.ess_scaling {
            return Ok(lr);
        }
        let rho_on = self
            .rho_on
            .ok_or_else(|| Error::config("optimizer.rho_on_value", "ESS scaling needs an on-policy reference"))?;
        Ok(scaled_lr(rho_off.clamp(0.0, 1.0), rho_on, lr))
    }

    /// One AdamW step minimising a loss whose gradient is `grad`.
    pub fn adamw_step(&mut self, theta: &mut [f64], grad: &[f64], rho_off: f64) -> Result<StepOutcome> {
        if grad.len() != theta.len() || theta.len() != self.m.len() {
            return Err(Error::Input("gradient and parameter sizes differ".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::Skipped {
                reason: "non-finite gradient".into(),
            });
        }
        let lr = self.effective_lr(rho_off)?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let [b1, b2] = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.cfg.weight_decay;
        for i in 0..theta.len() {
            let g = grad[i] * scale;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] = theta[i] * decay - lr * mhat / (vhat.sqrt() + self.cfg.eps);
        }
        Ok(StepOutcome::Applied {
            lr_eff: lr,
            pre_clip_norm: norm,
        })
    }
}
