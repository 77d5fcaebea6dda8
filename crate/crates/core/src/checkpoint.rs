//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FFPK" | version u32 | meta_len u64 | meta (UTF-8 JSON)
//! tensor_count u32
//! per tensor: name_len u32 | name | dtype u8 (0 = f32, 1 = f64) | ndim u8 | dims u64×ndim | offset u64
//! payload (offsets are relative to its start)
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecParams;
use crate::data::DataParams;
use crate::dit::{ModelConfig, ModelParams};
use crate::error::{FfpError, Result};
use crate::heads::HeadPartition;
use crate::rng::{stream_rng, Stream};

pub const MAGIC: &[u8; 4] = b"FFPK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Everything besides the tensors that `eval` needs to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub codec: CodecParams,
    pub data: DataParams,
    pub step: u64,
    /// Whether attention used the adaptive routing at the end of training.
    pub adaptive: bool,
    pub partition: Option<HeadPartition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FfpError::Format(msg.into()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_as(DType::F64)
    }

    /// Serialises with every tensor stored as `dtype`. `F32` is lossy.
    pub fn to_bytes_as(&self, dtype: DType) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("meta serialises");
        let named = self.params.named();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, a) in &named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype.tag());
            out.push(2);
            for d in [a.nrows(), a.ncols()] {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (a.len() * dtype.width()) as u64;
        }
        for (_, a) in &named {
            for &v in a.iter() {
                match dtype {
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return format_err("not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return format_err(format!("checkpoint version {version} unsupported"));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| FfpError::Format(format!("checkpoint metadata: {e}")))?;
        meta.model.validate()?;

        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| FfpError::Format("tensor name is not UTF-8".into()))?;
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                t => return format_err(format!("tensor {name}: unknown dtype tag {t}")),
            };
            let ndim = r.u8()? as usize;
            if ndim != 2 {
                return format_err(format!("tensor {name}: expected 2 dims, found {ndim}"));
            }
            let dims = (r.u64()? as usize, r.u64()? as usize);
            let offset = r.u64()? as usize;
            table.push((name, dtype, dims, offset));
        }
        let payload = &bytes[r.pos..];

        // Build the expected parameter layout, then fill it by name.
        let mut params = ModelParams::init(&mut stream_rng(0, Stream::Init, 0), &meta.model);
        let mut slots = params.named_mut();
        if slots.len() != table.len() {
            return format_err(format!(
                "checkpoint has {} tensors, model needs {}",
                table.len(),
                slots.len()
            ));
        }
        for ((name, dtype, dims, offset), (want, slot)) in table.into_iter().zip(slots.iter_mut()) {
            if &name != want {
                return format_err(format!("tensor {name} found where {want} was expected"));
            }
            if dims != slot.dim() {
                return format_err(format!(
                    "tensor {name}: shape {dims:?}, model needs {:?}",
                    slot.dim()
                ));
            }
            let n = dims.0 * dims.1;
            let end = offset + n * dtype.width();
            let Some(raw) = payload.get(offset..end) else {
                return format_err(format!("tensor {name}: payload truncated"));
            };
            let values: Vec<f64> = match dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            **slot = Array2::from_shape_vec(dims, values).expect("length checked");
        }
        drop(slots);
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => format_err("checkpoint truncated"),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Hex SHA-256 over tensor names, shapes and f64 little-endian values.
pub fn model_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for (name, a) in params.named() {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((a.nrows() as u64).to_le_bytes());
        h.update((a.ncols() as u64).to_le_bytes());
        for &v in a.iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
