//! AdamW with global-norm clipping, parameter groups and the warmup-cosine
//! learning-rate schedule.

use ebwm_autodiff::NdArray;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;

/// `base_lr * effective_batch_size / 256`.
pub fn scaled_lr(base_lr: f64, effective_batch_size: usize) -> f64 {
    base_lr * effective_batch_size as f64 / 256.0
}

/// Linear warmup from `lr / warmup_divider` to `lr` over `warmup_steps`,
/// then cosine decay to `lr / min_lr_scale` at `total_steps`.
pub fn lr_at_step(
    step: usize,
    lr: f64,
    warmup_steps: usize,
    warmup_divider: f64,
    min_lr_scale: f64,
    total_steps: usize,
) -> Result<f64> {
    if step > total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if warmup_steps == 0 || warmup_steps >= total_steps {
        return Err(Error::Config {
            key: "optim.warmup_steps".into(),
            msg: format!("must be in 1..{total_steps}, got {warmup_steps}"),
        });
    }
    if step <= warmup_steps {
        let f = step as f64 / warmup_steps as f64;
        return Ok(lr / warmup_divider * (1.0 - f) + lr * f);
    }
    let min = lr / min_lr_scale;
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let c = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(min * (1.0 - c) + lr * c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    #[serde(default = "default_divider")]
    pub warmup_divider: f64,
    #[serde(default = "default_min_scale")]
    pub min_lr_scale: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "one")]
    pub grad_clip: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_divider() -> f64 {
    20.0
}
fn default_min_scale() -> f64 {
    10.0
}
fn default_wd() -> f64 {
    0.01
}
fn one() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    pub fn with_lr(base_lr: f64, warmup_steps: usize) -> Self {
        Self {
            base_lr,
            warmup_steps,
            warmup_divider: default_divider(),
            min_lr_scale: default_min_scale(),
            weight_decay: default_wd(),
            grad_clip: one(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("base_lr", self.base_lr > 0.0),
            ("warmup_steps", self.warmup_steps >= 1),
            ("warmup_divider", self.warmup_divider >= 1.0),
            ("min_lr_scale", self.min_lr_scale >= 1.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("grad_clip", self.grad_clip > 0.0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps > 0.0),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::Config {
                    key: format!("optim.{key}"),
                    msg: "value out of range".into(),
                });
            }
        }
        Ok(())
    }
}

/// Learning-rate multiplier and decay switch for one parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamGroup {
    pub lr_scale: f64,
    pub weight_decay: bool,
}

impl ParamGroup {
    pub const DEFAULT: Self = Self {
        lr_scale: 1.0,
        weight_decay: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Learning rate applied to each parameter.
    pub lrs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &Params) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| vec![0.0; p.numel()])
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. Gradients are clipped to a global norm of `grad_clip`,
    /// weights decay by `lr * weight_decay` (decoupled), then the
    /// bias-corrected moment step is applied. A non-finite gradient leaves
    /// parameters and state untouched and returns [`Error::StepAborted`].
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &[NdArray],
        lr: f64,
        groups: &[ParamGroup],
    ) -> Result<StepReport> {
        assert_eq!(grads.len(), params.len());
        assert_eq!(groups.len(), params.len());
        let norm = grads
            .iter()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::StepAborted);
        }
        let clip = if norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let mut lrs = Vec::with_capacity(grads.len());
        let mut updated = Vec::with_capacity(grads.len());
        for (i, (p, g)) in params.values().iter().zip(grads).enumerate() {
            let group = groups[i];
            let lr_i = lr * group.lr_scale;
            let decay = if group.weight_decay {
                1.0 - lr_i * self.cfg.weight_decay
            } else {
                1.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut out = Vec::with_capacity(p.numel());
            for (j, (&w, &gj)) in p.data().iter().zip(g.data()).enumerate() {
                let gj = gj * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                out.push(w * decay - lr_i * mhat / (vhat.sqrt() + self.cfg.eps));
            }
            updated.push(NdArray::new(p.shape(), out)?);
            lrs.push(lr_i);
        }
        params.set_values(updated);
        Ok(StepReport {
            grad_norm: norm,
            lrs,
        })
    }
}
