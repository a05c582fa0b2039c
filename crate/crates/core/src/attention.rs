//! Single-head dot-product self-attention in the column layout `X ∈ ℝ^{d×n}`
//! (one token per column):
//!
//! ```text
//! P = Xᵀ Wqᵀ Wk X,   A = softmax(P / √d_q)  (per column),   Y = Wv X A
//! ```
//!
//! With QKNorm every column of `Q = Wq X` and `K = Wk X` is RMS-normalized
//! with its own gain before the logits `P′ = Q′ᵀ K′` are formed, and the
//! logit scale becomes `1/√d_h`.
//!
//! The dense Jacobians here are materialized through Kronecker products and
//! are meant for verification at toy sizes. [`attention_backward`] is the
//! equivalent matrix-form pass that never builds them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norms::{self, NormParams, DEFAULT_EPSILON};
use crate::tensor::{block_diag, commutation_matrix, kron, unvec, vec, Matrix, Vector};

/// Additive logit for masked positions.
pub const MASK_LOGIT: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Option<Matrix>,
    pub gamma_q: Option<Vector>,
    pub gamma_k: Option<Vector>,
    pub use_qknorm: bool,
    pub epsilon: f64,
    /// Output column `j` only attends to tokens `i <= j`.
    pub causal: bool,
}

impl AttentionParams {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        let p = Self {
            wq,
            wk,
            wv,
            wo: None,
            gamma_q: None,
            gamma_k: None,
            use_qknorm: false,
            epsilon: DEFAULT_EPSILON,
            causal: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// Enables QKNorm with unit gains.
    pub fn with_qknorm(mut self) -> Self {
        let dh = self.wq.rows();
        self.use_qknorm = true;
        self.gamma_q = Some(Vector::ones(dh));
        self.gamma_k = Some(Vector::ones(dh));
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn d_model(&self) -> usize {
        self.wq.cols()
    }

    pub fn d_q(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_v(&self) -> usize {
        self.wv.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.wq.cols();
        if self.wk.shape() != self.wq.shape() {
            return Err(Error::Shape {
                op: "AttentionParams",
                left: self.wq.shape(),
                right: self.wk.shape(),
            });
        }
        if self.wv.cols() != d {
            return Err(Error::Shape {
                op: "AttentionParams",
                left: self.wq.shape(),
                right: self.wv.shape(),
            });
        }
        if let Some(wo) = &self.wo {
            if wo.cols() != self.wv.rows() {
                return Err(Error::Shape {
                    op: "AttentionParams (Wo)",
                    left: self.wv.shape(),
                    right: wo.shape(),
                });
            }
        }
        match (self.use_qknorm, &self.gamma_q, &self.gamma_k) {
            (true, Some(gq), Some(gk)) => {
                for g in [gq, gk] {
                    if g.len() != self.d_q() {
                        return Err(Error::Length {
                            op: "AttentionParams (QKNorm gain)",
                            expected: self.d_q(),
                            got: g.len(),
                        });
                    }
                }
            }
            (false, None, None) => {}
            _ => {
                return Err(Error::Contract(
                    "QKNorm gains must be present exactly when QKNorm is enabled".into(),
                ))
            }
        }
        Ok(())
    }

    fn logit_scale(&self) -> f64 {
        1.0 / (self.d_q() as f64).sqrt()
    }

    fn qk_norm_params(&self) -> Option<(NormParams, NormParams)> {
        match (&self.gamma_q, &self.gamma_k) {
            (Some(gq), Some(gk)) if self.use_qknorm => Some((
                NormParams::rms(gq.len()).with_gamma(gq.clone()).with_epsilon(self.epsilon),
                NormParams::rms(gk.len()).with_gamma(gk.clone()).with_epsilon(self.epsilon),
            )),
            _ => None,
        }
    }
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCache {
    pub x: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub q_norm: Option<Matrix>,
    pub k_norm: Option<Matrix>,
    /// `P` (or `P′` under QKNorm), before scaling and masking.
    pub logits: Matrix,
    /// Column-stochastic attention matrix.
    pub attn: Matrix,
    /// `Wv X A`.
    pub y: Matrix,
    /// `Wo Y`, when `Wo` is present.
    pub out: Option<Matrix>,
}

impl AttentionCache {
    pub fn n_tokens(&self) -> usize {
        self.x.cols()
    }

    fn qk_views(&self) -> (&Matrix, &Matrix) {
        match (&self.q_norm, &self.k_norm) {
            (Some(q), Some(k)) => (q, k),
            _ => (&self.q, &self.k),
        }
    }
}

fn normalize_columns(m: &Matrix, p: &NormParams) -> Result<Matrix> {
    let mut out = m.clone();
    for j in 0..m.cols() {
        let col = norms::rmsnorm_forward(&m.column(j), p)?;
        out.set_column(j, col.as_slice());
    }
    Ok(out)
}

/// Column-wise softmax of `scale · logits`, masking `i > j` when `causal`.
pub fn column_softmax(logits: &Matrix, scale: f64, causal: bool) -> Matrix {
    let n = logits.rows();
    let m = logits.cols();
    let mut a = Matrix::zeros(n, m);
    for j in 0..m {
        let z: Vec<f64> = (0..n)
            .map(|i| {
                let base = scale * logits[(i, j)];
                if causal && i > j {
                    base + MASK_LOGIT
                } else {
                    base
                }
            })
            .collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        for i in 0..n {
            a[(i, j)] = e[i] / s;
        }
    }
    a
}

pub fn attention_forward(x: &Matrix, p: &AttentionParams) -> Result<AttentionCache> {
    p.validate()?;
    if x.rows() != p.d_model() {
        return Err(Error::Shape {
            op: "attention_forward",
            left: p.wq.shape(),
            right: x.shape(),
        });
    }
    let q = p.wq.matmul(x)?;
    let k = p.wk.matmul(x)?;
    let (q_norm, k_norm) = match p.qk_norm_params() {
        Some((nq, nk)) => (Some(normalize_columns(&q, &nq)?), Some(normalize_columns(&k, &nk)?)),
        None => (None, None),
    };
    let (qv, kv) = match (&q_norm, &k_norm) {
        (Some(a), Some(b)) => (a, b),
        _ => (&q, &k),
    };
    let logits = qv.transpose().matmul(kv)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("attention logits".into()));
    }
    let attn = column_softmax(&logits, p.logit_scale(), p.causal);
    let y = p.wv.matmul(x)?.matmul(&attn)?;
    let out = match &p.wo {
        Some(wo) => Some(wo.matmul(&y)?),
        None => None,
    };
    Ok(AttentionCache {
        x: x.clone(),
        q,
        k,
        q_norm,
        k_norm,
        logits,
        attn,
        y,
        out,
    })
}

/// `blockdiag(diag(a_j) − a_j a_jᵀ)` over the columns `a_j` of `A`.
pub fn softmax_jacobian_blockdiag(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    for j in 0..a.cols() {
        let s: f64 = (0..n).map(|i| a[(i, j)]).sum();
        if (s - 1.0).abs() > 1e-6 || (0..n).any(|i| a[(i, j)] < 0.0) {
            return Err(Error::Contract(format!(
                "softmax_jacobian_blockdiag: column {j} is not a probability vector (sum {s})"
            )));
        }
    }
    let blocks: Vec<Matrix> = (0..a.cols())
        .map(|j| {
            let col = a.column(j);
            Matrix::from_fn(n, n, |r, c| {
                let d = if r == c { col[r] } else { 0.0 };
                d - col[r] * col[c]
            })
        })
        .collect();
    block_diag(&blocks)
}

/// `∂vec(Y)/∂vec(X)` for attention without QKNorm:
/// `(Aᵀ⊗Wv) + (I⊗WvX)(J/√d_q)((XᵀWkᵀWq⊗I)C + (I⊗XᵀWqᵀWk))`.
pub fn attention_jacobian_x(cache: &AttentionCache, p: &AttentionParams) -> Result<Matrix> {
    if p.use_qknorm {
        return Err(Error::Contract(
            "attention_jacobian_x: QKNorm is enabled, use qknorm_attention_jacobian_x".into(),
        ));
    }
    let x = &cache.x;
    let (d, n) = x.shape();
    let eye_n = Matrix::identity(n);
    let wvx = p.wv.matmul(x)?;
    let value_path = kron(&cache.attn.transpose(), &p.wv)?;
    let j = softmax_jacobian_blockdiag(&cache.attn)?.scale(p.logit_scale());
    let xt = x.transpose();
    let left = kron(&xt.matmul(&p.wk.transpose())?.matmul(&p.wq)?, &eye_n)?
        .matmul(&commutation_matrix(d, n)?)?;
    let right = kron(&eye_n, &xt.matmul(&p.wq.transpose())?.matmul(&p.wk)?)?;
    let logit_path = kron(&eye_n, &wvx)?.matmul(&j)?.matmul(&left.add(&right)?)?;
    value_path.add(&logit_path)
}

/// `∂vec(Y)/∂vec(X)` under QKNorm:
/// `(A′ᵀ⊗Wv) + (I⊗WvX)(J/√d_h)((K′ᵀ⊗I)C J_Q (I⊗Wq) + (I⊗Q′ᵀ) J_K (I⊗Wk))`.
pub fn qknorm_attention_jacobian_x(cache: &AttentionCache, p: &AttentionParams) -> Result<Matrix> {
    let (nq, nk) = p
        .qk_norm_params()
        .ok_or_else(|| Error::Contract("qknorm_attention_jacobian_x: QKNorm is disabled".into()))?;
    let (qn, kn) = cache.qk_views();
    let x = &cache.x;
    let n = x.cols();
    let dh = p.d_q();
    let eye_n = Matrix::identity(n);
    let value_path = kron(&cache.attn.transpose(), &p.wv)?;
    let j = softmax_jacobian_blockdiag(&cache.attn)?.scale(p.logit_scale());
    let jq = block_diag(
        &(0..n)
            .map(|i| norms::rmsnorm_jacobian(&cache.q.column(i), &nq))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let jk = block_diag(
        &(0..n)
            .map(|i| norms::rmsnorm_jacobian(&cache.k.column(i), &nk))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let through_q = kron(&kn.transpose(), &eye_n)?
        .matmul(&commutation_matrix(dh, n)?)?
        .matmul(&jq)?
        .matmul(&kron(&eye_n, &p.wq)?)?;
    let through_k = kron(&eye_n, &qn.transpose())?
        .matmul(&jk)?
        .matmul(&kron(&eye_n, &p.wk)?)?;
    let wvx = p.wv.matmul(x)?;
    let logit_path = kron(&eye_n, &wvx)?
        .matmul(&j)?
        .matmul(&through_q.add(&through_k)?)?;
    value_path.add(&logit_path)
}

/// Gradient of the raw logit `P′_ij = q′_iᵀ k′_j` with respect to the token
/// matrix `X`, returned with the shape of `X` (only columns `i` and `j` are
/// non-zero):
///
/// ```text
/// ∂P′_ij/∂x_i = k′_jᵀ · J_rms(q_i; γ_q) · Wq,   ∂P′_ij/∂x_j = q′_iᵀ · J_rms(k_j; γ_k) · Wk
/// ```
pub fn qknorm_logit_grad(i: usize, j: usize, cache: &AttentionCache, p: &AttentionParams) -> Result<Matrix> {
    let (nq, nk) = p
        .qk_norm_params()
        .ok_or_else(|| Error::Contract("qknorm_logit_grad: QKNorm is disabled".into()))?;
    let n = cache.n_tokens();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::OutOfRange {
                what: "token",
                index: idx,
                len: n,
            });
        }
    }
    let (qn, kn) = cache.qk_views();
    let jq = norms::rmsnorm_jacobian(&cache.q.column(i), &nq)?;
    let jk = norms::rmsnorm_jacobian(&cache.k.column(j), &nk)?;
    let gi = jq.matmul(&p.wq)?.transpose().mul_vec(kn.column(j).as_slice())?;
    let gj = jk.matmul(&p.wk)?.transpose().mul_vec(qn.column(i).as_slice())?;
    let mut g = Matrix::zeros(p.d_model(), n);
    for r in 0..p.d_model() {
        g[(r, i)] += gi[r];
        g[(r, j)] += gj[r];
    }
    Ok(g)
}

/// Weight gradients from the vectorized chain rule, given `upstream = ∂L/∂Y`:
///
/// ```text
/// ∂L/∂vec(Wq) = gᵀ (I⊗WvX)(J/√d_q)((WkX)ᵀ⊗Xᵀ) C
/// ∂L/∂vec(Wk) = gᵀ (I⊗WvX)(J/√d_q)(Xᵀ⊗(WqX)ᵀ)
/// ∂L/∂vec(Wv) = gᵀ ((XA)ᵀ⊗I)
/// ```
pub fn attention_grad_weights(
    cache: &AttentionCache,
    p: &AttentionParams,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    if p.use_qknorm {
        return Err(Error::Contract(
            "attention_grad_weights: Kronecker route covers attention without QKNorm".into(),
        ));
    }
    if upstream.shape() != cache.y.shape() {
        return Err(Error::Shape {
            op: "attention_grad_weights",
            left: cache.y.shape(),
            right: upstream.shape(),
        });
    }
    let x = &cache.x;
    let (d, n) = x.shape();
    let g = vec(upstream);
    let eye_n = Matrix::identity(n);
    let dq = p.d_q();
    let wvx = p.wv.matmul(x)?;
    let j = softmax_jacobian_blockdiag(&cache.attn)?.scale(p.logit_scale());
    let to_logits = kron(&eye_n, &wvx)?.matmul(&j)?;
    let xt = x.transpose();

    let d_wq = to_logits
        .matmul(&kron(&cache.k.transpose(), &xt)?)?
        .matmul(&commutation_matrix(dq, d)?)?;
    let d_wk = to_logits.matmul(&kron(&xt, &cache.q.transpose())?)?;
    let d_wv = kron(&x.matmul(&cache.attn)?.transpose(), &Matrix::identity(p.d_v()))?;

    let pull = |jac: &Matrix, rows, cols| -> Result<Matrix> {
        let r = jac.transpose().mul_vec(g.as_slice())?;
        unvec(r.as_slice(), rows, cols)
    };
    Ok((
        pull(&d_wq, dq, d)?,
        pull(&d_wk, dq, d)?,
        pull(&d_wv, p.d_v(), d)?,
    ))
}

/// Gradients produced by [`attention_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub d_x: Matrix,
    pub d_wq: Matrix,
    pub d_wk: Matrix,
    pub d_wv: Matrix,
    pub d_gamma_q: Option<Vector>,
    pub d_gamma_k: Option<Vector>,
}

/// Matrix-form backward pass from `upstream = ∂L/∂Y`; no Kronecker products.
pub fn attention_backward(
    cache: &AttentionCache,
    p: &AttentionParams,
    upstream: &Matrix,
) -> Result<AttentionGrads> {
    if upstream.shape() != cache.y.shape() {
        return Err(Error::Shape {
            op: "attention_backward",
            left: cache.y.shape(),
            right: upstream.shape(),
        });
    }
    let x = &cache.x;
    let n = x.cols();
    let a = &cache.attn;
    let v = p.wv.matmul(x)?;
    let d_v = upstream.matmul(&a.transpose())?;
    let d_a = v.transpose().matmul(upstream)?;
    let scale = p.logit_scale();
    let mut d_p = Matrix::zeros(n, n);
    for j in 0..n {
        let inner: f64 = (0..n).map(|i| a[(i, j)] * d_a[(i, j)]).sum();
        for i in 0..n {
            d_p[(i, j)] = scale * a[(i, j)] * (d_a[(i, j)] - inner);
        }
    }
    let (qv, kv) = cache.qk_views();
    let mut d_q = kv.matmul(&d_p.transpose())?;
    let mut d_k = qv.matmul(&d_p)?;
    let (mut d_gamma_q, mut d_gamma_k) = (None, None);
    if let Some((nq, nk)) = p.qk_norm_params() {
        let pull = |raw: &Matrix, upstream: &Matrix, np: &NormParams| -> Result<(Matrix, Vector)> {
            let mut dx = Matrix::zeros(raw.rows(), raw.cols());
            let mut dg = vec![0.0; raw.rows()];
            for c in 0..raw.cols() {
                let col = raw.column(c);
                let r = norms::rms_denominator(col.as_slice(), np.epsilon)?;
                let mut out = vec![0.0; raw.rows()];
                norms::rmsnorm_vjp(
                    col.as_slice(),
                    np.gamma.as_slice(),
                    r,
                    upstream.column(c).as_slice(),
                    &mut out,
                    Some(&mut dg),
                );
                dx.set_column(c, &out);
            }
            Ok((dx, Vector::new(dg)?))
        };
        let (dq_raw, dgq) = pull(&cache.q, &d_q, &nq)?;
        let (dk_raw, dgk) = pull(&cache.k, &d_k, &nk)?;
        d_q = dq_raw;
        d_k = dk_raw;
        d_gamma_q = Some(dgq);
        d_gamma_k = Some(dgk);
    }
    let xt = x.transpose();
    let d_x = p
        .wq
        .transpose()
        .matmul(&d_q)?
        .add(&p.wk.transpose().matmul(&d_k)?)?
        .add(&p.wv.transpose().matmul(&d_v)?)?;
    Ok(AttentionGrads {
        d_x,
        d_wq: d_q.matmul(&xt)?,
        d_wk: d_k.matmul(&xt)?,
        d_wv: d_v.matmul(&xt)?,
        d_gamma_q,
        d_gamma_k,
    })
}
