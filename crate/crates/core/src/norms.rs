//! RMSNorm and LayerNorm: forward maps, dense Jacobians, and the
//! vector-Jacobian products the training path uses.
//!
//! Both norms add `epsilon` to the squared norm inside the square root:
//! `RMSN(x) = γ ⊙ √d·x / √(‖x‖² + ε)`. With `ε = 0` the identities
//! (scale invariance, `‖RMSN(x)‖ = √d` at unit gain) are exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix, Real, Vector};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: Vector,
    /// Present only for LayerNorm.
    pub beta: Option<Vector>,
    pub epsilon: f64,
}

impl NormParams {
    /// Unit-gain RMSNorm over `d` features.
    pub fn rms(d: usize) -> Self {
        Self {
            gamma: Vector::ones(d),
            beta: None,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// LayerNorm with `γ = 1`, `β = 0`.
    pub fn layer(d: usize) -> Self {
        Self {
            gamma: Vector::ones(d),
            beta: Some(Vector::zeros(d)),
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_gamma(mut self, gamma: Vector) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, op: &'static str, x: &[f64]) -> Result<()> {
        if x.len() != self.gamma.len() {
            return Err(Error::Length {
                op,
                expected: self.gamma.len(),
                got: x.len(),
            });
        }
        if let Some(beta) = &self.beta {
            if beta.len() != self.gamma.len() {
                return Err(Error::Length {
                    op,
                    expected: self.gamma.len(),
                    got: beta.len(),
                });
            }
        }
        if self.epsilon < 0.0 {
            return Err(Error::Contract(format!("{op}: epsilon must be non-negative")));
        }
        Ok(())
    }
}

/// `√(‖x‖² + ε)`, rejecting the zero-norm case.
pub fn rms_denominator(x: &[f64], epsilon: f64) -> Result<f64> {
    let r = (tensor::dot(x, x) + epsilon).sqrt();
    if r == 0.0 {
        return Err(Error::Degenerate("normalizing a zero vector with epsilon = 0".into()));
    }
    Ok(r)
}

/// Slice-level RMSNorm: writes `γ ⊙ √d·x / √(‖x‖²+ε)` into `out` and returns
/// the denominator.
pub fn rmsnorm_into<T: Real>(x: &[T], gamma: &[T], epsilon: T, out: &mut [T]) -> T {
    let d = T::of(x.len() as f64);
    let r = (x.iter().map(|&v| v * v).sum::<T>() + epsilon).sqrt();
    let s = d.sqrt() / r;
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gamma) {
        *o = g * s * xi;
    }
    r
}

/// Vector-Jacobian product of RMSNorm: given `dy = ∂L/∂y`, accumulates
/// `∂L/∂x` into `dx` and `∂L/∂γ` into `dgamma`. `r` is the forward denominator.
pub fn rmsnorm_vjp<T: Real>(x: &[T], gamma: &[T], r: T, dy: &[T], dx: &mut [T], dgamma: Option<&mut [T]>) {
    let s = T::of(x.len() as f64).sqrt() / r;
    let mut xg = T::zero();
    for ((&xi, &g), &d) in x.iter().zip(gamma).zip(dy) {
        xg += xi * g * d;
    }
    let c = xg / (r * r);
    for (((o, &xi), &g), &d) in dx.iter_mut().zip(x).zip(gamma).zip(dy) {
        *o += s * (g * d - xi * c);
    }
    if let Some(dgamma) = dgamma {
        for ((o, &xi), &d) in dgamma.iter_mut().zip(x).zip(dy) {
            *o += d * s * xi;
        }
    }
}

pub fn rmsnorm_forward(x: &Vector, p: &NormParams) -> Result<Vector> {
    p.check("rmsnorm_forward", x.as_slice())?;
    rms_denominator(x.as_slice(), p.epsilon)?;
    let mut out = vec![0.0; x.len()];
    rmsnorm_into(x.as_slice(), p.gamma.as_slice(), p.epsilon, &mut out);
    Vector::new(out)
}

/// `(√d/√(‖x‖²+ε))·diag(γ)·(I − xxᵀ/(‖x‖²+ε))`.
pub fn rmsnorm_jacobian(x: &Vector, p: &NormParams) -> Result<Matrix> {
    p.check("rmsnorm_jacobian", x.as_slice())?;
    let r = rms_denominator(x.as_slice(), p.epsilon)?;
    let d = x.len();
    let s = (d as f64).sqrt() / r;
    let r2 = r * r;
    Ok(Matrix::from_fn(d, d, |i, j| {
        let proj = if i == j { 1.0 } else { 0.0 } - x[i] * x[j] / r2;
        s * p.gamma[i] * proj
    }))
}

fn center(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

pub fn layernorm_forward(x: &Vector, p: &NormParams) -> Result<Vector> {
    p.check("layernorm_forward", x.as_slice())?;
    let beta = p
        .beta
        .as_ref()
        .ok_or_else(|| Error::Contract("layernorm_forward: beta is required".into()))?;
    let y = center(x.as_slice());
    rms_denominator(&y, p.epsilon)?;
    let mut out = vec![0.0; y.len()];
    rmsnorm_into(&y, p.gamma.as_slice(), p.epsilon, &mut out);
    for (o, b) in out.iter_mut().zip(beta.iter()) {
        *o += b;
    }
    Vector::new(out)
}

/// RMSNorm Jacobian at the centered input, times the centering projector.
pub fn layernorm_jacobian(x: &Vector, p: &NormParams) -> Result<Matrix> {
    p.check("layernorm_jacobian", x.as_slice())?;
    if p.beta.is_none() {
        return Err(Error::Contract("layernorm_jacobian: beta is required".into()));
    }
    let d = x.len();
    let y = Vector::new(center(x.as_slice()))?;
    let rms = NormParams {
        beta: None,
        ..p.clone()
    };
    let j = rmsnorm_jacobian(&y, &rms)?;
    let centering = Matrix::from_fn(d, d, |i, k| if i == k { 1.0 } else { 0.0 } - 1.0 / d as f64);
    j.matmul(&centering)
}
