//! Numerical core for deeply normalized Transformer blocks: dense linear
//! algebra, normalization layers, single-head attention and FFN with
//! analytic Jacobians, a small trainable language model, optimizers, and
//! gradient diagnostics.

pub mod attention;
pub mod diagnostics;
pub mod error;
pub mod ffn;
pub mod model;
pub mod norms;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
