//! Checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"DNTCKPT\0"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H, u64 little-endian
//! 20      H     UTF-8 JSON header (see `Header`)
//! 20+H    ...   f64 little-endian payload: parameters in header order,
//!               then the first optimizer buffer per tensor, then the
//!               second (AdamW only)
//! ```

use std::path::Path;

use dnt_core::model::{Model, ParamKind};
use dnt_core::optim::{Hyper, OptimizerKind, OptimizerState};
use dnt_core::tensor::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"DNTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: RunConfig,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Hyper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub model: Model,
    pub state: OptimizerState,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, model: &Model, state: &OptimizerState) -> Self {
        let tensors = model
            .params
            .views()
            .into_iter()
            .map(|v| TensorEntry {
                name: v.name,
                kind: v.kind,
                shape: v.shape,
            })
            .collect();
        Self {
            header: Header {
                config: config.clone(),
                seed: config.seed,
                step: state.step,
                tensors,
                optimizer: state.hyper.clone(),
            },
            model: model.clone(),
            state: state.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let params = self.model.params.views();
        let buffers = params
            .iter()
            .map(|v| v.data)
            .chain(self.state.first.iter().map(Vec::as_slice))
            .chain(self.state.second.iter().map(Vec::as_slice));
        for buf in buffers {
            for x in buf {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| HarnessError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(HarnessError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        header.config.validate()?;
        let mut payload = body[hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        if (body.len() - hlen) % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }

        let mut model = Model::new(header.config.model.clone(), &Rng::new(0))?;
        let expected: Vec<TensorEntry> = model
            .params
            .views()
            .into_iter()
            .map(|v| TensorEntry {
                name: v.name,
                kind: v.kind,
                shape: v.shape,
            })
            .collect();
        if expected != header.tensors {
            return Err(bad("tensor table does not match the configured model"));
        }
        let mut fill = |dst: &mut [f64]| -> Result<()> {
            for x in dst.iter_mut() {
                *x = payload.next().ok_or_else(|| bad("truncated payload"))?;
            }
            Ok(())
        };
        for v in model.params.views_mut() {
            fill(v.data)?;
        }
        let mut state = OptimizerState::new(header.optimizer.clone(), &model.params)?;
        state.step = header.step;
        for buf in state.first.iter_mut() {
            fill(buf)?;
        }
        if header.optimizer.kind == OptimizerKind::Adamw {
            for buf in state.second.iter_mut() {
                fill(buf)?;
            }
        }
        if payload.next().is_some() {
            return Err(bad("trailing payload"));
        }
        Ok(Self { header, model, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
