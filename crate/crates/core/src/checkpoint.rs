//! Versioned binary checkpoint of named tensors plus an embedded JSON config.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "PMNETCKP"
//! version      u32      1
//! total_len    u64      size of the whole file in bytes
//! float_bytes  u8       4 (f32) or 8 (f64)
//! step         u64      training steps completed
//! seed         u64      experiment seed
//! config_len   u64      followed by that many bytes of UTF-8 JSON
//! n_tensors    u32
//! per tensor:  name_len u32, name (UTF-8), ndim u32, dims u64 x ndim,
//!              values (little-endian floats, row-major)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, Params};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 8] = b"PMNETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint stores {stored}-byte floats, expected {expected}")]
    Precision { stored: u8, expected: usize },
    #[error("truncated or oversized checkpoint: header says {header} bytes, file has {actual}")]
    Length { header: u64, actual: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config: {0}")]
    Config(#[from] serde_json::Error),
}

/// Document embedded in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedded {
    pub model: ModelConfig,
    /// The full experiment configuration, when written by a training run.
    #[serde(default)]
    pub experiment: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F: Float> {
    pub config: Embedded,
    pub step: u64,
    pub seed: u64,
    pub params: Params<F>,
}

impl<F: Float> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let cfg = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        out.push(F::BYTES as u8);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.params.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.to_le(&mut out);
            }
        }
        let total = out.len() as u64;
        out[12..20].copy_from_slice(&total.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let total = r.u64()?;
        if total != bytes.len() as u64 {
            return Err(CheckpointError::Length {
                header: total,
                actual: bytes.len() as u64,
            });
        }
        let width = r.take(1)?[0];
        if width as usize != F::BYTES {
            return Err(CheckpointError::Precision {
                stored: width,
                expected: F::BYTES,
            });
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        let cfg_len = r.u64()? as usize;
        let config: Embedded = serde_json::from_slice(r.take(cfg_len)?)?;
        let n = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * F::BYTES)?;
            let data = raw.chunks(F::BYTES).map(F::from_le).collect();
            let t =
                Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!(
                    "duplicate tensor `{name}`"
                )));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            step,
            seed,
            params: Params { tensors },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::File::create(&tmp)?.write_all(&bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            CheckpointError::Malformed(format!("unexpected end of data at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
