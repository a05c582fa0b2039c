//! Momentum SGD with decoupled weight decay (mSGDW) and AdamW, with a
//! warmup-plus-cosine schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamKind, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Msgdw,
    Adamw,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Msgdw => "msgdw",
            Self::Adamw => "adamw",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "msgdw" | "sgd" | "sgdw" => Ok(Self::Msgdw),
            "adamw" | "adam" => Ok(Self::Adamw),
            other => Err(Error::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Hyperparameters shared by both optimizers; `beta2` and `eps` are only
/// read by AdamW.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default)]
    pub warmup: usize,
    pub weight_decay: f64,
    /// Momentum for mSGDW, `β₁` for AdamW.
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    #[serde(default)]
    pub clip: Option<f64>,
    /// Decay gains as well as weights and embeddings.
    #[serde(default)]
    pub decay_gains: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}

impl Hyper {
    pub fn msgdw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Msgdw,
            lr,
            lr_min: 0.0,
            warmup: 0,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip: None,
            decay_gains: false,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            ..Self::msgdw(lr, weight_decay)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !finite_nonneg(self.lr_min) || self.lr_min > self.lr {
            return bad(format!("lr_min must lie in [0, lr], got {}", self.lr_min));
        }
        if !finite_nonneg(self.weight_decay) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps to `lr`, then a cosine decay to
/// `lr_min` at step `total`; constant at `lr_min` afterwards. Steps are
/// 0-based.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, lr: f64, lr_min: f64) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    if step >= total || total <= warmup {
        return lr_min;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale_in_place(max_norm / norm);
    }
    norm
}

/// Per-tensor optimizer buffers, in [`Params::views`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub hyper: Hyper,
    /// Number of completed steps.
    pub step: u64,
    /// mSGDW momentum or AdamW first moment.
    pub first: Vec<Vec<f64>>,
    /// AdamW second moment; empty for mSGDW.
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(hyper: Hyper, params: &Params) -> Result<Self> {
        hyper.validate()?;
        let zeros: Vec<Vec<f64>> = params.views().iter().map(|v| vec![0.0; v.data.len()]).collect();
        let second = match hyper.kind {
            OptimizerKind::Adamw => zeros.clone(),
            OptimizerKind::Msgdw => Vec::new(),
        };
        Ok(Self {
            hyper,
            step: 0,
            first: zeros,
            second,
        })
    }

    fn decays(&self, kind: ParamKind) -> bool {
        kind != ParamKind::Gain || self.hyper.decay_gains
    }

    /// One update at learning rate `lr`.
    ///
    /// mSGDW: `m ← μm + g`, `w ← w − lr·m − lr·λ·w`.
    /// AdamW: bias-corrected moments, `w ← w − lr·m̂/(√v̂ + ε) − lr·λ·w`.
    ///
    /// A non-finite gradient is rejected before anything is modified.
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        let gv = grads.views();
        if gv.len() != self.first.len() {
            return Err(Error::Length {
                op: "optimizer step (tensor count)",
                expected: self.first.len(),
                got: gv.len(),
            });
        }
        for (g, m) in gv.iter().zip(&self.first) {
            if g.data.len() != m.len() {
                return Err(Error::Length {
                    op: "optimizer step",
                    expected: m.len(),
                    got: g.data.len(),
                });
            }
            if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::PoisonedStep(format!("gradient of `{}` is non-finite at {i}", g.name)));
            }
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {lr}")));
        }
        let h = self.hyper.clone();
        let t = self.step + 1;
        let (bc1, bc2) = (1.0 - h.beta1.powi(t as i32), 1.0 - h.beta2.powi(t as i32));
        for (idx, (pv, g)) in params.views_mut().into_iter().zip(&gv).enumerate() {
            let decay = if self.decays(pv.kind) { lr * h.weight_decay } else { 0.0 };
            let m = &mut self.first[idx];
            match h.kind {
                OptimizerKind::Msgdw => {
                    for ((w, &gi), mi) in pv.data.iter_mut().zip(g.data).zip(m.iter_mut()) {
                        *mi = h.beta1 * *mi + gi;
                        *w -= lr * *mi + decay * *w;
                    }
                }
                OptimizerKind::Adamw => {
                    let v = &mut self.second[idx];
                    for (((w, &gi), mi), vi) in pv.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
                        *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
                        let update = (*mi / bc1) / ((*vi / bc2).sqrt() + h.eps);
                        *w -= lr * update + decay * *w;
                    }
                }
            }
        }
        self.step = t;
        Ok(())
    }
}
