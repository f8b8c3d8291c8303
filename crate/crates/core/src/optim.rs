//! Decoupled-weight-decay Adam and the milestone learning-rate schedule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cast, Real};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// When false, normalization scales/shifts, biases and the class,
    /// position and mask tokens are not decayed.
    #[serde(default = "default_true")]
    pub decay_all: bool,
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
fn default_true() -> bool {
    true
}

impl OptimConfig {
    pub fn new(base_lr: f64, weight_decay: f64) -> Self {
        Self {
            base_lr,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            decay_all: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Multiply the rate by `gamma` at every listed (0-based) epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilestoneSchedule {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MilestoneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "milestones {:?} not strictly ascending",
                self.milestones
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// `base_lr · gamma^k`, `k` = number of milestones `≤ epoch`. Evaluated as
/// `base_lr / (1/gamma)^k` so decimal rates stay exact for gamma 0.1 or 0.5.
pub fn lr_at_epoch(base_lr: f64, schedule: &MilestoneSchedule, epoch: usize) -> f64 {
    let k = schedule.milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr / schedule.gamma.recip().powi(k as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Intermediate,
    Finetune,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Pretrain, Phase::Intermediate, Phase::Finetune];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Intermediate => "intermediate",
            Phase::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase {s:?}")))
    }
}

pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub optim: OptimConfig,
    pub schedule: MilestoneSchedule,
    pub batch_size: usize,
    /// Fraction of patches hidden per image (reconstruction phase only).
    pub mask_ratio: f64,
}

impl PhaseConfig {
    /// Per-phase optimizer and schedule settings used for the reported grid.
    pub fn defaults(phase: Phase) -> Self {
        let (epochs, lr, wd, gamma, milestones) = match phase {
            Phase::Pretrain => (100, 1e-4, 0.05, 0.1, vec![50, 85]),
            Phase::Intermediate => (200, 8e-4, 0.0, 0.1, vec![180, 190]),
            Phase::Finetune => (100, 2e-3, 1e-4, 0.5, vec![70, 90, 95]),
        };
        Self {
            phase,
            epochs,
            optim: OptimConfig::new(lr, wd),
            schedule: MilestoneSchedule { milestones, gamma },
            batch_size: DEFAULT_BATCH_SIZE,
            mask_ratio: crate::objectives::MASK_RATIO,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config(format!("{} phase needs at least one epoch", self.phase)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        self.optim.validate()?;
        self.schedule.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at_epoch(self.optim.base_lr, &self.schedule, epoch)
    }
}

/// First and second moment accumulators, one flat buffer per tensor in
/// canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new<P: ParamSet<T>>(params: &P) -> Self {
        let mut first = Vec::new();
        params.visit(&mut |_, v, _| first.push(vec![T::zero(); v.len()]));
        Self {
            step: 0,
            second: first.clone(),
            first,
        }
    }
}

fn exempt_from_decay(path: &str) -> bool {
    path.ends_with(".scale")
        || path.ends_with(".shift")
        || path.ends_with(".bias")
        || path == "pos_embed"
        || path == "cls_token"
        || path.ends_with("mask_token")
}

/// One update:
///
/// ```text
/// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
/// m̂ = m/(1−β₁ᵗ)            v̂ = v/(1−β₂ᵗ)
/// θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)
/// ```
///
/// Refuses the whole step (nothing is modified) when any gradient entry is
/// not finite.
pub fn optimizer_step<T: Real, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut OptimState<T>,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    if let Some(path) = grads.first_non_finite() {
        log::warn!("refusing optimizer step: non-finite gradient in {path}");
        return Err(Error::NonFinite(format!("gradient of {path}")));
    }
    let mut flat = Vec::new();
    grads.visit(&mut |_, g, _| flat.push(g.to_vec()));
    if flat.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "{} gradient tensors for {} optimizer slots",
            flat.len(),
            state.first.len()
        )));
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = cast::<T>(1.0 - b1.powi(t));
    let bc2 = cast::<T>(1.0 - b2.powi(t));
    let (b1t, b2t) = (cast::<T>(b1), cast::<T>(b2));
    let (one_b1, one_b2) = (cast::<T>(1.0 - b1), cast::<T>(1.0 - b2));
    let (lr_t, eps) = (cast::<T>(lr), cast::<T>(cfg.eps));

    let mut i = 0;
    let mut shape_error = None;
    params.visit_mut(&mut |path, theta| {
        let g = &flat[i];
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        if g.len() != theta.len() || m.len() != theta.len() {
            shape_error.get_or_insert_with(|| path.to_string());
            i += 1;
            return;
        }
        let wd = if cfg.decay_all || !exempt_from_decay(path) {
            cast::<T>(cfg.weight_decay)
        } else {
            T::zero()
        };
        for j in 0..theta.len() {
            m[j] = b1t * m[j] + one_b1 * g[j];
            v[j] = b2t * v[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * theta[j]);
        }
        i += 1;
    });
    match shape_error {
        Some(path) => Err(Error::Shape(format!("gradient/parameter size mismatch at {path}"))),
        None => Ok(()),
    }
}
