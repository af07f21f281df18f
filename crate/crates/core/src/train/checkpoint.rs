//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPA1" | u32 version | u32 header_len | header JSON
//!        | u32 tensor_count | { u32 name_len | name | u32 rank | u64 dims.. | f64 data.. }*
//!        | 32-byte SHA-256 of everything before it
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{BaseParams, GateParams, ModelConfig, SideParams, SpaModel};
use crate::numcore::Tensor;

use super::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPA1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error("checkpoint schema error: {0}")]
    Schema(String),
}

impl CheckpointError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::Io(_) => 1,
            CheckpointError::BadMagic => 2,
            CheckpointError::Version { .. } => 3,
            CheckpointError::Checksum => 4,
            CheckpointError::Schema(_) => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Checksum of the base the side network was trained against.
    pub base_checksum: String,
}

/// Parameter names a device needs: the side network plus embedding tables and the output head.
pub fn is_device_param(name: &str) -> bool {
    name.starts_with("side.")
        || name == "base.tok_emb"
        || name == "base.pos_emb"
        || name.starts_with("base.final_norm.")
        || name.starts_with("base.head.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &SpaModel, train: Option<&TrainConfig>) -> Self {
        Self::filtered(model, train, |_| true)
    }

    pub fn from_base(config: &ModelConfig, base: &BaseParams) -> Self {
        Self {
            header: CheckpointHeader {
                model: config.clone(),
                train: None,
                base_checksum: base.checksum(),
            },
            tensors: base.named().into_iter().map(|(n, t)| (n, detached(t))).collect(),
        }
    }

    /// Side network and the tensors needed to run it on a device; no transformer layers or gate.
    pub fn device(model: &SpaModel, train: Option<&TrainConfig>) -> Self {
        Self::filtered(model, train, is_device_param)
    }

    fn filtered(model: &SpaModel, train: Option<&TrainConfig>, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            header: CheckpointHeader {
                model: model.config.clone(),
                train: train.cloned(),
                base_checksum: model.base.checksum(),
            },
            tensors: model
                .named()
                .into_iter()
                .filter(|(n, _)| keep(n))
                .map(|(n, t)| (n, detached(t)))
                .collect(),
        }
    }

    pub fn names(&self) -> BTreeSet<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_value(&self.header).expect("header serialises");
        let header = serde_json::to_string(&header).expect("value serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(CheckpointError::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| CheckpointError::Schema(format!("header: {e}")))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| CheckpointError::Schema("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().product::<usize>();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| CheckpointError::Schema("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Schema(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Schema("trailing bytes after tensors".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every stored tensor into a model skeleton, requiring `required` names to be present.
    fn fill(&self, required: impl Fn(&str) -> bool) -> Result<SpaModel, CheckpointError> {
        let cfg = &self.header.model;
        cfg.validate().map_err(|e| CheckpointError::Schema(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = SpaModel {
            config: cfg.clone(),
            base: BaseParams::init(cfg, &mut rng),
            side: SideParams::zeros(cfg),
            gate: GateParams::zeros(cfg),
        };
        let mut seen = BTreeSet::new();
        {
            let mut slots = model.named_mut();
            for (name, t) in &self.tensors {
                let slot = slots
                    .iter_mut()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| CheckpointError::Schema(format!("unknown parameter '{name}'")))?;
                if slot.1.shape() != t.shape() {
                    return Err(CheckpointError::Schema(format!(
                        "parameter '{name}' has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.1.shape()
                    )));
                }
                if !seen.insert(name.clone()) {
                    return Err(CheckpointError::Schema(format!("duplicate parameter '{name}'")));
                }
                slot.1.data_mut().copy_from_slice(t.data());
            }
        }
        if let Some((missing, _)) = model.named().into_iter().find(|(n, _)| required(n) && !seen.contains(n)) {
            return Err(CheckpointError::Schema(format!("missing parameter '{missing}'")));
        }
        model.base.set_frozen(true);
        model.side.set_trainable(false);
        model.gate.set_trainable(false);
        Ok(model)
    }

    pub fn into_model(&self) -> Result<SpaModel, CheckpointError> {
        self.fill(|_| true)
    }

    pub fn into_base(&self) -> Result<BaseParams, CheckpointError> {
        Ok(self.fill(|n| n.starts_with("base."))?.base)
    }

    /// Model whose device-side tensors are loaded; everything else is placeholder.
    pub fn into_device_model(&self) -> Result<SpaModel, CheckpointError> {
        self.fill(is_device_param)
    }
}

fn detached(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("same shape")
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Schema("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
