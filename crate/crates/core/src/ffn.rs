//! Two-layer ReLU feed-forward block `z = W₂ ReLU(W₁x)`, optionally followed
//! by a MidNorm before the residual add.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norms::{self, NormParams};
use crate::tensor::{Matrix, Vector};

/// Hidden width used when none is given: four times the model width.
pub const DEFAULT_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    /// `hidden x d`
    pub w1: Matrix,
    /// `d x hidden`
    pub w2: Matrix,
    pub midnorm: Option<NormParams>,
}

impl FfnParams {
    pub fn new(w1: Matrix, w2: Matrix, midnorm: Option<NormParams>) -> Result<Self> {
        if w1.rows() != w2.cols() {
            return Err(Error::Shape {
                op: "FfnParams",
                left: w1.shape(),
                right: w2.shape(),
            });
        }
        if let Some(m) = &midnorm {
            if m.dim() != w2.rows() {
                return Err(Error::Length {
                    op: "FfnParams (MidNorm gain)",
                    expected: w2.rows(),
                    got: m.dim(),
                });
            }
        }
        Ok(Self { w1, w2, midnorm })
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    fn pre_activation(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.d_in() {
            return Err(Error::Length {
                op: "ffn",
                expected: self.d_in(),
                got: x.len(),
            });
        }
        self.w1.mul_vec(x.as_slice())
    }

    /// `W₂ ReLU(W₁x)` without the MidNorm.
    pub fn raw_output(&self, x: &Vector) -> Result<Vector> {
        let h = self.pre_activation(x)?;
        let relu: Vec<f64> = h.iter().map(|&v| v.max(0.0)).collect();
        self.w2.mul_vec(&relu)
    }

    /// ReLU gate `1(W₁x > 0)`; the subgradient at exactly zero is 0.
    pub fn activation_pattern(&self, x: &Vector) -> Result<Vec<bool>> {
        Ok(self.pre_activation(x)?.iter().map(|&v| v > 0.0).collect())
    }

    /// `min_i |(W₁x)_i|`, the distance to the nearest activation boundary.
    pub fn boundary_distance(&self, x: &Vector) -> Result<f64> {
        Ok(self
            .pre_activation(x)?
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }
}

pub fn ffn_forward(x: &Vector, p: &FfnParams) -> Result<Vector> {
    let z = p.raw_output(x)?;
    match &p.midnorm {
        None => Ok(z),
        Some(np) => {
            if z.iter().all(|&v| v == 0.0) {
                return Err(Error::Degenerate("MidNorm input is the zero vector".into()));
            }
            norms::rmsnorm_forward(&z, np)
        }
    }
}

/// `W₂ · diag(1(W₁x > 0)) · W₁`.
pub fn ffn_jacobian(x: &Vector, p: &FfnParams) -> Result<Matrix> {
    let gate = p.activation_pattern(x)?;
    let mut gated = p.w1.clone();
    for (r, &on) in gate.iter().enumerate() {
        if !on {
            gated.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    p.w2.matmul(&gated)
}

/// Jacobian of `MidNorm ∘ FFN`: `J_rms(z) · W₂ diag(1(W₁x>0)) W₁`, which at
/// `ε = 0` equals `√d diag(γ)(I − zzᵀ/‖z‖²) W₂ diag(·) W₁ / ‖z‖`.
pub fn ffn_midnorm_jacobian(x: &Vector, p: &FfnParams) -> Result<Matrix> {
    let np = p
        .midnorm
        .as_ref()
        .ok_or_else(|| Error::Contract("ffn_midnorm_jacobian: MidNorm is not configured".into()))?;
    let z = p.raw_output(x)?;
    if z.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("MidNorm input is the zero vector".into()));
    }
    norms::rmsnorm_jacobian(&z, np)?.matmul(&ffn_jacobian(x, p)?)
}

/// High-dimensional prediction of `σ₁(W / ‖Wx‖)` for an `m x n` matrix with
/// i.i.d. entries and `x` with i.i.d. entries of standard deviation `sigma_x`:
/// `(√m + √n) / (√(mn)·σ_x)`. Independent of the scale of `W`.
pub fn normalized_weight_sigma_max(m: usize, n: usize, sigma_x: f64) -> f64 {
    let (m, n) = (m as f64, n as f64);
    (m.sqrt() + n.sqrt()) / ((m * n).sqrt() * sigma_x)
}
