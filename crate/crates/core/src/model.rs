//! Single-head language model built from the five normalization settings.
//!
//! Activations in the training path are token-major: a batch of `B`
//! sequences of length `n` is an `(B·n) x d` row-major buffer, so every
//! linear layer is one GEMM. Row `j` of a sequence block is the `j`-th column
//! of the column-layout `X` used in [`crate::attention`]; the attention
//! weights stored here are the transposes `S = Aᵀ` (row-stochastic), which
//! keeps the same definition `P = XᵀWqᵀWkX`, `A = softmax(P/√d_q)` per column.
//!
//! The backward pass applies every Jacobian as a vector-Jacobian product and
//! never materializes one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norms::{rmsnorm_into, rmsnorm_vjp, DEFAULT_EPSILON};
use crate::tensor::{gemm, Matrix, Operand, Real, Rng, Vector};

/// Which normalizations a model carries.
///
/// | setting | InputNorm | PreNorm (attn) | QKNorm | MidNorm | PreNorm (FFN) |
/// |---------|-----------|----------------|--------|---------|---------------|
/// | S1      |           | yes            |        |         | yes           |
/// | S2      |           | yes            | yes    |         | yes           |
/// | S3      | yes       | yes            | yes    |         | yes           |
/// | S4      | yes       | yes            | yes    | yes     | yes           |
/// | S5      | yes       | yes            | yes    | yes     |               |
///
/// S5 is the default deeply normalized block. PostNorm is never used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormSetting {
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl NormSetting {
    pub const ALL: [NormSetting; 5] = [Self::S1, Self::S2, Self::S3, Self::S4, Self::S5];

    pub fn input_norm(self) -> bool {
        matches!(self, Self::S3 | Self::S4 | Self::S5)
    }

    pub fn pre_norm_attn(self) -> bool {
        true
    }

    pub fn qk_norm(self) -> bool {
        !matches!(self, Self::S1)
    }

    pub fn mid_norm(self) -> bool {
        matches!(self, Self::S4 | Self::S5)
    }

    pub fn pre_norm_ffn(self) -> bool {
        !matches!(self, Self::S5)
    }
}

impl fmt::Display for NormSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for NormSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S1" => Ok(Self::S1),
            "S2" => Ok(Self::S2),
            "S3" => Ok(Self::S3),
            "S4" => Ok(Self::S4),
            "S5" | "DNT" => Ok(Self::S5),
            other => Err(Error::InvalidConfig(format!("unknown norm setting `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    /// Number of blocks.
    pub depth: usize,
    /// Maximum sequence length (rows of the positional table).
    pub seq_len: usize,
    /// FFN hidden width; `0` means `4·d_model`.
    #[serde(default)]
    pub ffn_hidden: usize,
    pub setting: NormSetting,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_true")]
    pub causal: bool,
    #[serde(default)]
    pub tied_embeddings: bool,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(vocab: usize, d_model: usize, depth: usize, seq_len: usize, setting: NormSetting) -> Self {
        Self {
            vocab,
            d_model,
            depth,
            seq_len,
            ffn_hidden: 0,
            setting,
            epsilon: DEFAULT_EPSILON,
            causal: true,
            tied_embeddings: false,
        }
    }

    pub fn hidden(&self) -> usize {
        if self.ffn_hidden == 0 {
            crate::ffn::DEFAULT_EXPANSION * self.d_model
        } else {
            self.ffn_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab < 2 {
            return bad(format!("vocab must be >= 2, got {}", self.vocab));
        }
        if self.d_model < 2 {
            return bad(format!("d_model must be >= 2, got {}", self.d_model));
        }
        if self.depth < 1 {
            return bad("depth must be >= 1".into());
        }
        if self.seq_len < 1 {
            return bad("seq_len must be >= 1".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (v, d, h) = (self.vocab, self.d_model, self.hidden());
        let s = self.setting;
        let per_block = d
            + 4 * d * d
            + if s.qk_norm() { 2 * d } else { 0 }
            + if s.mid_norm() { 2 * d } else { 0 }
            + if s.pre_norm_ffn() { d } else { 0 }
            + 2 * d * h;
        v * d
            + self.seq_len * d
            + if s.input_norm() { d } else { 0 }
            + self.depth * per_block
            + d
            + if self.tied_embeddings { 0 } else { v * d }
    }
}

/// How a parameter participates in weight decay and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Embedding,
    Weight,
    Gain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attn_norm: Vector,
    /// `d x d` each (single head, `d_q = d_v = d`).
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub gamma_q: Option<Vector>,
    pub gamma_k: Option<Vector>,
    pub attn_mid: Option<Vector>,
    pub ffn_norm: Option<Vector>,
    /// `hidden x d`
    pub w1: Matrix,
    /// `d x hidden`
    pub w2: Matrix,
    pub ffn_mid: Option<Vector>,
}

/// Every trainable tensor of a model. Gradients use the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// `vocab x d`
    pub tok_emb: Matrix,
    /// `seq_len x d`
    pub pos_emb: Matrix,
    pub input_norm: Option<Vector>,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Vector,
    /// `vocab x d`; absent when tied to `tok_emb`.
    pub head: Option<Matrix>,
}

/// Borrowed view of one named parameter tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: (usize, usize),
    pub data: &'a mut [f64],
}

macro_rules! visit_params {
    ($p:expr, $view:ident, $mat:ident, $vecf:ident $(, $m:tt)?) => {{
        let p = $p;
        let mut out = Vec::new();
        macro_rules! mat {
            ($name:expr, $kind:expr, $t:expr) => {{
                let t = $t;
                let shape = t.shape();
                out.push($view { name: $name, kind: $kind, shape, data: t.$mat() });
            }};
        }
        macro_rules! gain {
            ($name:expr, $g:expr) => {{
                let g = $g;
                let shape = (1, g.len());
                out.push($view { name: $name, kind: ParamKind::Gain, shape, data: g.$vecf() });
            }};
        }
        mat!("tok_emb".to_string(), ParamKind::Embedding, &$($m)? p.tok_emb);
        mat!("pos_emb".to_string(), ParamKind::Embedding, &$($m)? p.pos_emb);
        if let Some(g) = &$($m)? p.input_norm {
            gain!("input_norm.gamma".to_string(), g);
        }
        for (l, b) in (&$($m)? p.blocks).into_iter().enumerate() {
            gain!(format!("blocks.{l}.attn_norm.gamma"), &$($m)? b.attn_norm);
            mat!(format!("blocks.{l}.attn.wq"), ParamKind::Weight, &$($m)? b.wq);
            mat!(format!("blocks.{l}.attn.wk"), ParamKind::Weight, &$($m)? b.wk);
            mat!(format!("blocks.{l}.attn.wv"), ParamKind::Weight, &$($m)? b.wv);
            mat!(format!("blocks.{l}.attn.wo"), ParamKind::Weight, &$($m)? b.wo);
            if let Some(g) = &$($m)? b.gamma_q {
                gain!(format!("blocks.{l}.attn.gamma_q"), g);
            }
            if let Some(g) = &$($m)? b.gamma_k {
                gain!(format!("blocks.{l}.attn.gamma_k"), g);
            }
            if let Some(g) = &$($m)? b.attn_mid {
                gain!(format!("blocks.{l}.attn_mid.gamma"), g);
            }
            if let Some(g) = &$($m)? b.ffn_norm {
                gain!(format!("blocks.{l}.ffn_norm.gamma"), g);
            }
            mat!(format!("blocks.{l}.ffn.w1"), ParamKind::Weight, &$($m)? b.w1);
            mat!(format!("blocks.{l}.ffn.w2"), ParamKind::Weight, &$($m)? b.w2);
            if let Some(g) = &$($m)? b.ffn_mid {
                gain!(format!("blocks.{l}.ffn_mid.gamma"), g);
            }
        }
        gain!("final_norm.gamma".to_string(), &$($m)? p.final_norm);
        if let Some(h) = &$($m)? p.head {
            mat!("head".to_string(), ParamKind::Weight, h);
        }
        out
    }};
}

impl Params {
    /// All tensors in a fixed, documented order.
    pub fn views(&self) -> Vec<ParamView<'_>> {
        visit_params!(self, ParamView, as_slice, as_slice)
    }

    pub fn views_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        visit_params!(self, ParamViewMut, as_mut_slice, as_mut_slice, mut)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for v in z.views_mut() {
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn count(&self) -> usize {
        self.views().iter().map(|v| v.data.len()).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.views().into_iter().map(|v| v.name).collect()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.views().into_iter().find(|v| v.name == name).map(|v| v.data)
    }

    pub fn is_finite(&self) -> bool {
        self.views().iter().all(|v| v.data.iter().all(|x| x.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.views()
            .iter()
            .flat_map(|v| v.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in self.views_mut() {
            v.data.iter_mut().for_each(|x| *x *= c);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

fn xavier_uniform(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| a * (2.0 * rng.uniform() - 1.0))
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.normal())
}

/// Standard deviation of the embedding initialization.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

impl Model {
    /// Xavier-uniform linear weights, `N(0, 0.02²)` embeddings, unit gains.
    pub fn new(config: ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let (v, d, h) = (config.vocab, config.d_model, config.hidden());
        let s = config.setting;
        let mut emb_rng = rng.split(0);
        let tok_emb = normal_matrix(&mut emb_rng, v, d, EMBEDDING_INIT_STD);
        let pos_emb = normal_matrix(&mut emb_rng, config.seq_len, d, EMBEDDING_INIT_STD);
        let gain = |on: bool| on.then(|| Vector::ones(d));
        let blocks = (0..config.depth)
            .map(|l| {
                let mut r = rng.split(1 + l as u64);
                BlockParams {
                    attn_norm: Vector::ones(d),
                    wq: xavier_uniform(&mut r, d, d),
                    wk: xavier_uniform(&mut r, d, d),
                    wv: xavier_uniform(&mut r, d, d),
                    wo: xavier_uniform(&mut r, d, d),
                    gamma_q: gain(s.qk_norm()),
                    gamma_k: gain(s.qk_norm()),
                    attn_mid: gain(s.mid_norm()),
                    ffn_norm: gain(s.pre_norm_ffn()),
                    w1: xavier_uniform(&mut r, h, d),
                    w2: xavier_uniform(&mut r, d, h),
                    ffn_mid: gain(s.mid_norm()),
                }
            })
            .collect();
        let head = (!config.tied_embeddings).then(|| {
            let mut r = rng.split(1_000_000);
            xavier_uniform(&mut r, v, d)
        });
        let params = Params {
            tok_emb,
            pos_emb,
            input_norm: gain(s.input_norm()),
            blocks,
            final_norm: Vector::ones(d),
            head,
        };
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn check_batch(&self, batch: &[&[usize]]) -> Result<usize> {
        let n = batch.first().map_or(0, |s| s.len());
        if batch.is_empty() || n == 0 {
            return Err(Error::Contract("forward: empty batch".into()));
        }
        if n > self.config.seq_len {
            return Err(Error::OutOfRange {
                what: "sequence length",
                index: n,
                len: self.config.seq_len,
            });
        }
        for seq in batch {
            if seq.len() != n {
                return Err(Error::Length {
                    op: "forward (batch rows must share a length)",
                    expected: n,
                    got: seq.len(),
                });
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= self.config.vocab) {
                return Err(Error::OutOfRange {
                    what: "token",
                    index: t,
                    len: self.config.vocab,
                });
            }
        }
        Ok(n)
    }

    /// Logits for one sequence, `n x vocab`.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Matrix, ForwardCache)> {
        self.forward_batch(&[tokens])
    }

    /// Logits for a batch of equal-length sequences, `(B·n) x vocab`, with
    /// sequence `b` occupying rows `b·n .. (b+1)·n`.
    pub fn forward_batch(&self, batch: &[&[usize]]) -> Result<(Matrix, ForwardCache)> {
        let (logits, cache) = self.forward_batch_in::<f64>(batch)?;
        Ok((Matrix::new(logits.len() / self.config.vocab, self.config.vocab, logits)?, cache))
    }

    /// [`Model::forward_batch`] with activations of element type `T`; the
    /// logits are returned row-major.
    pub fn forward_batch_in<T: Real>(&self, batch: &[&[usize]]) -> Result<(Vec<T>, ForwardCache<T>)> {
        let n = self.check_batch(batch)?;
        let cfg = &self.config;
        let w = Weights::<T>::cast(&self.params);
        let d = cfg.d_model;
        let b = batch.len();
        let rows = b * n;
        let eps = T::of(cfg.epsilon);

        let mut embed = vec![T::zero(); rows * d];
        let tokens: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        for (r, &t) in tokens.iter().enumerate() {
            let pos = r % n;
            let out = &mut embed[r * d..(r + 1) * d];
            let (te, pe) = (&w.tok_emb[t * d..(t + 1) * d], &w.pos_emb[pos * d..(pos + 1) * d]);
            for ((o, &e), &p) in out.iter_mut().zip(te).zip(pe) {
                *o = e + p;
            }
        }
        let input_norm = w.input_norm.as_ref().map(|g| RowNorm::forward(&embed, d, g, eps));
        let mut x = match &input_norm {
            Some(nrm) => nrm.out.clone(),
            None => embed.clone(),
        };

        let mut blocks = Vec::with_capacity(w.blocks.len());
        for bw in &w.blocks {
            let (cache, next) = block_forward(bw, x, b, n, cfg)?;
            blocks.push(cache);
            x = next;
        }

        let final_norm = RowNorm::forward(&x, d, &w.final_norm, eps);
        let mut logits = vec![T::zero(); rows * cfg.vocab];
        gemm(
            Operand::new(&final_norm.out, rows, d),
            Operand::new(w.head(), cfg.vocab, d).t(),
            T::zero(),
            &mut logits,
        );
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let cache = ForwardCache {
            batch: b,
            n,
            tokens,
            embed,
            input_norm,
            blocks,
            x_final: x,
            final_norm,
            weights: w,
        };
        Ok((logits, cache))
    }

    /// Gradients of every parameter given `dlogits = ∂L/∂logits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Params> {
        let rows = cache.batch * cache.n;
        if dlogits.shape() != (rows, self.config.vocab) {
            return Err(Error::Shape {
                op: "backward (stale cache)",
                left: (rows, self.config.vocab),
                right: dlogits.shape(),
            });
        }
        self.backward_in(cache, dlogits.as_slice())
    }

    /// [`Model::backward`] for a cache of element type `T`; `dlogits` is
    /// row-major `(B·n) x vocab`. The cache carries the weights it was
    /// computed with.
    pub fn backward_in<T: Real>(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> Result<Params> {
        let cfg = &self.config;
        let w = &cache.weights;
        let d = cfg.d_model;
        let rows = cache.batch * cache.n;
        if dlogits.len() != rows * cfg.vocab || !w.same_layout(&self.params) {
            return Err(Error::Shape {
                op: "backward (stale cache)",
                left: (rows, cfg.vocab),
                right: (dlogits.len() / cfg.vocab.max(1), cfg.vocab),
            });
        }
        let mut g = w.zeros_like();

        let mut d_final = vec![T::zero(); rows * d];
        gemm(
            Operand::new(dlogits, rows, cfg.vocab),
            Operand::new(w.head(), cfg.vocab, d),
            T::zero(),
            &mut d_final,
        );
        gemm(
            Operand::new(dlogits, rows, cfg.vocab).t(),
            Operand::new(&cache.final_norm.out, rows, d),
            T::one(),
            g.head_mut(),
        );
        let mut dx = vec![T::zero(); rows * d];
        cache
            .final_norm
            .backward(&cache.x_final, d, &w.final_norm, &d_final, &mut dx, &mut g.final_norm);

        for (l, bw) in w.blocks.iter().enumerate().rev() {
            dx = block_backward(bw, &cache.blocks[l], dx, cache.batch, cache.n, cfg, &mut g.blocks[l]);
        }

        let d_embed = match (&cache.input_norm, &w.input_norm, g.input_norm.as_mut()) {
            (Some(nrm), Some(gain), Some(dg)) => {
                let mut de = vec![T::zero(); rows * d];
                nrm.backward(&cache.embed, d, gain, &dx, &mut de, dg);
                de
            }
            _ => dx,
        };
        for (r, &t) in cache.tokens.iter().enumerate() {
            let pos = r % cache.n;
            let src = &d_embed[r * d..(r + 1) * d];
            for (o, &v) in g.tok_emb[t * d..(t + 1) * d].iter_mut().zip(src) {
                *o += v;
            }
            for (o, &v) in g.pos_emb[pos * d..(pos + 1) * d].iter_mut().zip(src) {
                *o += v;
            }
        }
        let mut grads = self.params.zeros_like();
        g.write_into(&mut grads);
        Ok(grads)
    }

    /// Mean next-token cross-entropy over all positions and its gradient.
    pub fn loss_and_grad(&self, inputs: &[&[usize]], targets: &[&[usize]]) -> Result<(f64, Params)> {
        self.loss_and_grad_in::<f64>(inputs, targets)
    }

    pub fn loss_and_grad_in<T: Real>(&self, inputs: &[&[usize]], targets: &[&[usize]]) -> Result<(f64, Params)> {
        let (logits, cache) = self.forward_batch_in::<T>(inputs)?;
        let flat_targets = flatten_targets(inputs, targets)?;
        let (loss, dlogits) = cross_entropy_rows(&logits, self.config.vocab, &flat_targets)?;
        let grads = self.backward_in(&cache, &dlogits)?;
        Ok((loss, grads))
    }

    pub fn loss_and_grad_with(
        &self,
        precision: Precision,
        inputs: &[&[usize]],
        targets: &[&[usize]],
    ) -> Result<(f64, Params)> {
        match precision {
            Precision::F64 => self.loss_and_grad_in::<f64>(inputs, targets),
            Precision::F32 => self.loss_and_grad_in::<f32>(inputs, targets),
        }
    }

    pub fn loss(&self, inputs: &[&[usize]], targets: &[&[usize]]) -> Result<f64> {
        self.loss_in::<f64>(inputs, targets)
    }

    pub fn loss_in<T: Real>(&self, inputs: &[&[usize]], targets: &[&[usize]]) -> Result<f64> {
        let (logits, _) = self.forward_batch_in::<T>(inputs)?;
        let flat_targets = flatten_targets(inputs, targets)?;
        Ok(cross_entropy_rows(&logits, self.config.vocab, &flat_targets)?.0)
    }

    pub fn loss_with(&self, precision: Precision, inputs: &[&[usize]], targets: &[&[usize]]) -> Result<f64> {
        match precision {
            Precision::F64 => self.loss_in::<f64>(inputs, targets),
            Precision::F32 => self.loss_in::<f32>(inputs, targets),
        }
    }
}

/// Element type of activations in the batched path. Parameters, optimizer
/// state and accumulated losses stay in `f64` either way.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::F64 => "f64",
            Self::F32 => "f32",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f64" => Ok(Self::F64),
            "f32" => Ok(Self::F32),
            other => Err(Error::InvalidConfig(format!("unknown precision `{other}`"))),
        }
    }
}

fn flatten_targets(inputs: &[&[usize]], targets: &[&[usize]]) -> Result<Vec<usize>> {
    if inputs.len() != targets.len() {
        return Err(Error::Length {
            op: "loss (batch size)",
            expected: inputs.len(),
            got: targets.len(),
        });
    }
    let mut flat = Vec::new();
    for (i, t) in inputs.iter().zip(targets) {
        if i.len() != t.len() {
            return Err(Error::Length {
                op: "loss (target length)",
                expected: i.len(),
                got: t.len(),
            });
        }
        flat.extend_from_slice(t);
    }
    Ok(flat)
}

/// Mean cross-entropy of row-wise softmax(logits) against `targets`, and its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let (rows, v) = logits.shape();
    let (loss, grad) = cross_entropy_rows(logits.as_slice(), v, targets)?;
    Ok((loss, Matrix::new(rows, v, grad)?))
}

/// [`cross_entropy`] on a row-major `rows x vocab` buffer. The loss is
/// accumulated in `f64`.
pub fn cross_entropy_rows<T: Real>(logits: &[T], vocab: usize, targets: &[usize]) -> Result<(f64, Vec<T>)> {
    let rows = logits.len() / vocab.max(1);
    if targets.len() != rows || rows * vocab != logits.len() {
        return Err(Error::Length {
            op: "cross_entropy",
            expected: rows,
            got: targets.len(),
        });
    }
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    let inv = 1.0 / rows as f64;
    for (r, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::OutOfRange {
                what: "target",
                index: t,
                len: vocab,
            });
        }
        let z = &logits[r * vocab..(r + 1) * vocab];
        let max = z.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
        let sum: f64 = z.iter().map(|&x| (x.as_f64() - max).exp()).sum();
        let log_sum = max + sum.ln();
        total += log_sum - z[t].as_f64();
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        for (gi, &zi) in g.iter_mut().zip(z) {
            *gi = T::of((zi.as_f64() - log_sum).exp() * inv);
        }
        g[t] -= T::of(inv);
    }
    Ok((total * inv, grad))
}

/// Parameters cast to the activation type of one forward pass; also the
/// layout of the gradients accumulated by the backward pass.
#[derive(Clone, Debug)]
pub struct Weights<T> {
    tok_emb: Vec<T>,
    pos_emb: Vec<T>,
    input_norm: Option<Vec<T>>,
    blocks: Vec<BlockWeights<T>>,
    final_norm: Vec<T>,
    head: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
struct BlockWeights<T> {
    attn_norm: Vec<T>,
    wq: Vec<T>,
    wk: Vec<T>,
    wv: Vec<T>,
    wo: Vec<T>,
    gamma_q: Option<Vec<T>>,
    gamma_k: Option<Vec<T>>,
    attn_mid: Option<Vec<T>>,
    ffn_norm: Option<Vec<T>>,
    w1: Vec<T>,
    w2: Vec<T>,
    ffn_mid: Option<Vec<T>>,
    hidden: usize,
}

fn cast<T: Real>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::of(v)).collect()
}

fn cast_opt<T: Real>(x: &Option<Vector>) -> Option<Vec<T>> {
    x.as_ref().map(|v| cast(v.as_slice()))
}

fn zeros<T: Real>(x: &[T]) -> Vec<T> {
    vec![T::zero(); x.len()]
}

fn add_into<T: Real>(dst: &mut [f64], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v.as_f64();
    }
}

fn add_into_opt<T: Real>(dst: Option<&mut Vector>, src: &Option<Vec<T>>) {
    if let (Some(d), Some(s)) = (dst, src) {
        add_into(d.as_mut_slice(), s);
    }
}

impl<T: Real> Weights<T> {
    fn cast(p: &Params) -> Self {
        Self {
            tok_emb: cast(p.tok_emb.as_slice()),
            pos_emb: cast(p.pos_emb.as_slice()),
            input_norm: cast_opt(&p.input_norm),
            blocks: p
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    attn_norm: cast(b.attn_norm.as_slice()),
                    wq: cast(b.wq.as_slice()),
                    wk: cast(b.wk.as_slice()),
                    wv: cast(b.wv.as_slice()),
                    wo: cast(b.wo.as_slice()),
                    gamma_q: cast_opt(&b.gamma_q),
                    gamma_k: cast_opt(&b.gamma_k),
                    attn_mid: cast_opt(&b.attn_mid),
                    ffn_norm: cast_opt(&b.ffn_norm),
                    w1: cast(b.w1.as_slice()),
                    w2: cast(b.w2.as_slice()),
                    ffn_mid: cast_opt(&b.ffn_mid),
                    hidden: b.w1.rows(),
                })
                .collect(),
            final_norm: cast(p.final_norm.as_slice()),
            head: p.head.as_ref().map(|h| cast(h.as_slice())),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |o: &Option<Vec<T>>| o.as_deref().map(zeros);
        Self {
            tok_emb: zeros(&self.tok_emb),
            pos_emb: zeros(&self.pos_emb),
            input_norm: z(&self.input_norm),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    attn_norm: zeros(&b.attn_norm),
                    wq: zeros(&b.wq),
                    wk: zeros(&b.wk),
                    wv: zeros(&b.wv),
                    wo: zeros(&b.wo),
                    gamma_q: z(&b.gamma_q),
                    gamma_k: z(&b.gamma_k),
                    attn_mid: z(&b.attn_mid),
                    ffn_norm: z(&b.ffn_norm),
                    w1: zeros(&b.w1),
                    w2: zeros(&b.w2),
                    ffn_mid: z(&b.ffn_mid),
                    hidden: b.hidden,
                })
                .collect(),
            final_norm: zeros(&self.final_norm),
            head: z(&self.head),
        }
    }

    fn head(&self) -> &[T] {
        self.head.as_deref().unwrap_or(&self.tok_emb)
    }

    fn head_mut(&mut self) -> &mut [T] {
        match self.head.as_mut() {
            Some(h) => h,
            None => &mut self.tok_emb,
        }
    }

    fn same_layout(&self, p: &Params) -> bool {
        self.tok_emb.len() == p.tok_emb.len()
            && self.pos_emb.len() == p.pos_emb.len()
            && self.input_norm.is_some() == p.input_norm.is_some()
            && self.head.is_some() == p.head.is_some()
            && self.blocks.len() == p.blocks.len()
            && self.blocks.iter().zip(&p.blocks).all(|(w, b)| {
                w.w1.len() == b.w1.len()
                    && w.wq.len() == b.wq.len()
                    && w.gamma_q.is_some() == b.gamma_q.is_some()
                    && w.attn_mid.is_some() == b.attn_mid.is_some()
                    && w.ffn_norm.is_some() == b.ffn_norm.is_some()
            })
    }

    fn write_into(&self, p: &mut Params) {
        add_into(p.tok_emb.as_mut_slice(), &self.tok_emb);
        add_into(p.pos_emb.as_mut_slice(), &self.pos_emb);
        add_into_opt(p.input_norm.as_mut(), &self.input_norm);
        for (dst, b) in p.blocks.iter_mut().zip(&self.blocks) {
            add_into(dst.attn_norm.as_mut_slice(), &b.attn_norm);
            add_into(dst.wq.as_mut_slice(), &b.wq);
            add_into(dst.wk.as_mut_slice(), &b.wk);
            add_into(dst.wv.as_mut_slice(), &b.wv);
            add_into(dst.wo.as_mut_slice(), &b.wo);
            add_into_opt(dst.gamma_q.as_mut(), &b.gamma_q);
            add_into_opt(dst.gamma_k.as_mut(), &b.gamma_k);
            add_into_opt(dst.attn_mid.as_mut(), &b.attn_mid);
            add_into_opt(dst.ffn_norm.as_mut(), &b.ffn_norm);
            add_into(dst.w1.as_mut_slice(), &b.w1);
            add_into(dst.w2.as_mut_slice(), &b.w2);
            add_into_opt(dst.ffn_mid.as_mut(), &b.ffn_mid);
        }
        add_into(p.final_norm.as_mut_slice(), &self.final_norm);
        if let (Some(dst), Some(h)) = (p.head.as_mut(), &self.head) {
            add_into(dst.as_mut_slice(), h);
        }
    }
}

/// Row-wise RMSNorm output and the per-row denominators.
#[derive(Clone, Debug)]
pub struct RowNorm<T = f64> {
    pub out: Vec<T>,
    pub denom: Vec<T>,
}

impl<T: Real> RowNorm<T> {
    fn forward(x: &[T], d: usize, gamma: &[T], eps: T) -> Self {
        let rows = x.len() / d;
        let mut out = vec![T::zero(); x.len()];
        let mut denom = Vec::with_capacity(rows);
        for r in 0..rows {
            denom.push(rmsnorm_into(&x[r * d..(r + 1) * d], gamma, eps, &mut out[r * d..(r + 1) * d]));
        }
        Self { out, denom }
    }

    /// Accumulates into `dx` and `dgamma`.
    fn backward(&self, x: &[T], d: usize, gamma: &[T], dy: &[T], dx: &mut [T], dgamma: &mut [T]) {
        for (r, &den) in self.denom.iter().enumerate() {
            let span = r * d..(r + 1) * d;
            rmsnorm_vjp(&x[span.clone()], gamma, den, &dy[span.clone()], &mut dx[span], Some(&mut *dgamma));
        }
    }
}

/// Intermediates of one block.
#[derive(Clone, Debug)]
pub struct BlockCache<T = f64> {
    /// Residual stream entering the block.
    pub x_in: Vec<T>,
    pub attn_in: RowNorm<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub q_norm: Option<RowNorm<T>>,
    pub k_norm: Option<RowNorm<T>>,
    /// Row-stochastic `S = Aᵀ`, one `n x n` block per sequence.
    pub attn: Vec<T>,
    pub y: Vec<T>,
    pub o: Vec<T>,
    pub attn_mid: Option<RowNorm<T>>,
    /// Residual stream after the attention sub-block.
    pub x_mid: Vec<T>,
    pub ffn_in: Option<RowNorm<T>>,
    pub h_pre: Vec<T>,
    pub h: Vec<T>,
    pub z: Vec<T>,
    pub ffn_mid: Option<RowNorm<T>>,
}

/// `x Wᵀ` for `w` of shape `out x in`.
fn linear<T: Real>(x: &[T], rows: usize, w: &[T], out_dim: usize) -> Vec<T> {
    let in_dim = w.len() / out_dim;
    let mut out = vec![T::zero(); rows * out_dim];
    gemm(Operand::new(x, rows, in_dim), Operand::new(w, out_dim, in_dim).t(), T::zero(), &mut out);
    out
}

/// Accumulates `dW += doutᵀ x` and `dx += dout W`.
fn linear_backward<T: Real>(dout: &[T], x: &[T], rows: usize, w: &[T], out_dim: usize, dw: &mut [T], dx: &mut [T]) {
    let in_dim = w.len() / out_dim;
    gemm(Operand::new(dout, rows, out_dim).t(), Operand::new(x, rows, in_dim), T::one(), dw);
    gemm(Operand::new(dout, rows, out_dim), Operand::new(w, out_dim, in_dim), T::one(), dx);
}

fn block_forward<T: Real>(
    bw: &BlockWeights<T>,
    x: Vec<T>,
    batch: usize,
    n: usize,
    cfg: &ModelConfig,
) -> Result<(BlockCache<T>, Vec<T>)> {
    let d = cfg.d_model;
    let rows = batch * n;
    let eps = T::of(cfg.epsilon);
    let attn_in = RowNorm::forward(&x, d, &bw.attn_norm, eps);
    let q = linear(&attn_in.out, rows, &bw.wq, d);
    let k = linear(&attn_in.out, rows, &bw.wk, d);
    let v = linear(&attn_in.out, rows, &bw.wv, d);
    let q_norm = bw.gamma_q.as_ref().map(|g| RowNorm::forward(&q, d, g, eps));
    let k_norm = bw.gamma_k.as_ref().map(|g| RowNorm::forward(&k, d, g, eps));
    let qv = q_norm.as_ref().map_or(&q, |nrm| &nrm.out);
    let kv = k_norm.as_ref().map_or(&k, |nrm| &nrm.out);

    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut attn = vec![T::zero(); batch * n * n];
    let mut y = vec![T::zero(); rows * d];
    for s in 0..batch {
        let span = s * n * d..(s + 1) * n * d;
        let sm = &mut attn[s * n * n..(s + 1) * n * n];
        // (K Qᵀ)_{ji} = k_j · q_i = P_ij
        gemm(
            Operand::new(&kv[span.clone()], n, d),
            Operand::new(&qv[span.clone()], n, d).t(),
            T::zero(),
            sm,
        );
        for j in 0..n {
            let row = &mut sm[j * n..(j + 1) * n];
            // masked logits contribute exactly zero weight
            let live = if cfg.causal { j + 1 } else { n };
            row[live..].iter_mut().for_each(|z| *z = T::zero());
            let row = &mut row[..live];
            let max = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z * scale));
            let mut sum = T::zero();
            for z in row.iter_mut() {
                *z = (*z * scale - max).exp();
                sum += *z;
            }
            let inv = T::one() / sum;
            row.iter_mut().for_each(|z| *z *= inv);
        }
        gemm(Operand::new(sm, n, n), Operand::new(&v[span.clone()], n, d), T::zero(), &mut y[span]);
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("attention output".into()));
    }
    let o = linear(&y, rows, &bw.wo, d);
    let attn_mid = bw.attn_mid.as_ref().map(|g| RowNorm::forward(&o, d, g, eps));
    let o_out = attn_mid.as_ref().map_or(&o, |nrm| &nrm.out);
    let x_mid: Vec<T> = x.iter().zip(o_out).map(|(&a, &b)| a + b).collect();

    let ffn_in = bw.ffn_norm.as_ref().map(|g| RowNorm::forward(&x_mid, d, g, eps));
    let f_in = ffn_in.as_ref().map_or(&x_mid, |nrm| &nrm.out);
    let h_pre = linear(f_in, rows, &bw.w1, bw.hidden);
    let h: Vec<T> = h_pre.iter().map(|&v| v.max(T::zero())).collect();
    let z = linear(&h, rows, &bw.w2, d);
    let ffn_mid = bw.ffn_mid.as_ref().map(|g| RowNorm::forward(&z, d, g, eps));
    let z_out = ffn_mid.as_ref().map_or(&z, |nrm| &nrm.out);
    let x_out: Vec<T> = x_mid.iter().zip(z_out).map(|(&a, &b)| a + b).collect();

    let cache = BlockCache {
        x_in: x,
        attn_in,
        q,
        k,
        v,
        q_norm,
        k_norm,
        attn,
        y,
        o,
        attn_mid,
        x_mid,
        ffn_in,
        h_pre,
        h,
        z,
        ffn_mid,
    };
    Ok((cache, x_out))
}

fn norm_backward_or_pass<T: Real>(
    nrm: Option<&RowNorm<T>>,
    x: &[T],
    d: usize,
    gamma: Option<&Vec<T>>,
    dgamma: Option<&mut Vec<T>>,
    dy: Vec<T>,
) -> Vec<T> {
    match (nrm, gamma, dgamma) {
        (Some(nrm), Some(g), Some(dg)) => {
            let mut dx = vec![T::zero(); dy.len()];
            nrm.backward(x, d, g, &dy, &mut dx, dg);
            dx
        }
        _ => dy,
    }
}

fn block_backward<T: Real>(
    bw: &BlockWeights<T>,
    c: &BlockCache<T>,
    d_out: Vec<T>,
    batch: usize,
    n: usize,
    cfg: &ModelConfig,
    g: &mut BlockWeights<T>,
) -> Vec<T> {
    let d = cfg.d_model;
    let hidden = bw.hidden;
    let rows = batch * n;

    // FFN sub-block
    let dz = norm_backward_or_pass(c.ffn_mid.as_ref(), &c.z, d, bw.ffn_mid.as_ref(), g.ffn_mid.as_mut(), d_out.clone());
    let mut dh = vec![T::zero(); rows * hidden];
    linear_backward(&dz, &c.h, rows, &bw.w2, d, &mut g.w2, &mut dh);
    for (gh, &pre) in dh.iter_mut().zip(&c.h_pre) {
        if pre <= T::zero() {
            *gh = T::zero();
        }
    }
    let f_in = c.ffn_in.as_ref().map_or(&c.x_mid, |nrm| &nrm.out);
    let mut df_in = vec![T::zero(); rows * d];
    linear_backward(&dh, f_in, rows, &bw.w1, hidden, &mut g.w1, &mut df_in);
    let through_ffn = norm_backward_or_pass(
        c.ffn_in.as_ref(),
        &c.x_mid,
        d,
        bw.ffn_norm.as_ref(),
        g.ffn_norm.as_mut(),
        df_in,
    );
    let mut d_mid = d_out;
    d_mid.iter_mut().zip(&through_ffn).for_each(|(a, &b)| *a += b);

    // attention sub-block
    let d_o = norm_backward_or_pass(
        c.attn_mid.as_ref(),
        &c.o,
        d,
        bw.attn_mid.as_ref(),
        g.attn_mid.as_mut(),
        d_mid.clone(),
    );
    let mut dy = vec![T::zero(); rows * d];
    linear_backward(&d_o, &c.y, rows, &bw.wo, d, &mut g.wo, &mut dy);

    let qv = c.q_norm.as_ref().map_or(&c.q, |nrm| &nrm.out);
    let kv = c.k_norm.as_ref().map_or(&c.k, |nrm| &nrm.out);
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut dqv = vec![T::zero(); rows * d];
    let mut dkv = vec![T::zero(); rows * d];
    let mut dv = vec![T::zero(); rows * d];
    let mut ds = vec![T::zero(); n * n];
    for s in 0..batch {
        let span = s * n * d..(s + 1) * n * d;
        let sm = &c.attn[s * n * n..(s + 1) * n * n];
        // dS = dY Vᵀ, dV = Sᵀ dY
        gemm(Operand::new(&dy[span.clone()], n, d), Operand::new(&c.v[span.clone()], n, d).t(), T::zero(), &mut ds);
        gemm(Operand::new(sm, n, n).t(), Operand::new(&dy[span.clone()], n, d), T::zero(), &mut dv[span.clone()]);
        for j in 0..n {
            let srow = &sm[j * n..(j + 1) * n];
            let drow = &mut ds[j * n..(j + 1) * n];
            let inner: T = srow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
            for (dz, &sv) in drow.iter_mut().zip(srow) {
                *dz = scale * sv * (*dz - inner);
            }
        }
        // logits (K Qᵀ): dK = dZ Q, dQ = dZᵀ K
        gemm(Operand::new(&ds, n, n), Operand::new(&qv[span.clone()], n, d), T::zero(), &mut dkv[span.clone()]);
        gemm(Operand::new(&ds, n, n).t(), Operand::new(&kv[span.clone()], n, d), T::zero(), &mut dqv[span]);
    }
    let dq = norm_backward_or_pass(c.q_norm.as_ref(), &c.q, d, bw.gamma_q.as_ref(), g.gamma_q.as_mut(), dqv);
    let dk = norm_backward_or_pass(c.k_norm.as_ref(), &c.k, d, bw.gamma_k.as_ref(), g.gamma_k.as_mut(), dkv);
    let mut da = vec![T::zero(); rows * d];
    linear_backward(&dq, &c.attn_in.out, rows, &bw.wq, d, &mut g.wq, &mut da);
    linear_backward(&dk, &c.attn_in.out, rows, &bw.wk, d, &mut g.wk, &mut da);
    linear_backward(&dv, &c.attn_in.out, rows, &bw.wv, d, &mut g.wv, &mut da);
    let mut dx = d_mid;
    c.attn_in.backward(&c.x_in, d, &bw.attn_norm, &da, &mut dx, &mut g.attn_norm);
    dx
}

/// Everything [`Model::backward`] needs from the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f64> {
    pub batch: usize,
    pub n: usize,
    pub tokens: Vec<usize>,
    /// Token plus positional embedding, before InputNorm.
    pub embed: Vec<T>,
    pub input_norm: Option<RowNorm<T>>,
    pub blocks: Vec<BlockCache<T>>,
    pub x_final: Vec<T>,
    pub final_norm: RowNorm<T>,
    weights: Weights<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Residual stream entering block `l` (`l = depth` gives the final
    /// stream), `(B·n) x d` row-major.
    pub fn residual(&self, l: usize) -> &[T] {
        if l < self.blocks.len() {
            &self.blocks[l].x_in
        } else {
            &self.x_final
        }
    }

    /// Mean per-token Euclidean norm of the residual stream at each block
    /// boundary, from the block input `x⁰` to the final stream.
    pub fn residual_norms(&self, d: usize) -> Vec<f64> {
        (0..=self.blocks.len())
            .map(|l| {
                let x = self.residual(l);
                let rows = x.len() / d;
                x.chunks(d)
                    .map(|r| r.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
                    .sum::<f64>()
                    / rows as f64
            })
            .collect()
    }
}
