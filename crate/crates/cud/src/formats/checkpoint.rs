//! Binary model checkpoints.
//!
//! Layout (little endian): `CUDM`, format version `u32`, config length `u32`
//! and the config as JSON, tensor count `u32`, then per tensor its rank
//! `u32`, dims `u32` each and the values as `f64`. A JSON sidecar next to
//! the file carries the config again plus training provenance.

use std::path::{Path, PathBuf};

use cud_core::kernel::Tensor;
use cud_core::model::Params;
use cud_core::{Model, ModelConfig};
use serde::{Deserialize, Serialize};

use super::{read_json, write_bytes, write_json};
use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"CUDM";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> AppResult<Vec<u8>> {
    let cfg = serde_json::to_vec(&model.cfg).map_err(AppError::json("model config"))?;
    let mut out = Vec::with_capacity(16 + cfg.len() + 8 * model.params.count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.tensors.len() as u32).to_le_bytes());
    for t in &model.params.tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> AppResult<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| AppError::Format {
            path: self.path.to_path_buf(),
            reason: "truncated checkpoint".into(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> AppResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> AppResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> AppResult<Model> {
    let bad = |reason: String| AppError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(bad("not a CUDM checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(n)?).map_err(AppError::json(path.display().to_string()))?;
    let expected = Params::shapes(&cfg);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(bad(format!("{count} tensors, expected {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<AppResult<Vec<_>>>()?;
        if &dims != shape {
            return Err(bad(format!("{name} has shape {dims:?}, expected {shape:?}")));
        }
        let len: usize = dims.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<AppResult<Vec<_>>>()?;
        tensors.push(Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    let mut model = Model::init(cfg)?;
    model.params = Params { tensors };
    Ok(model)
}

/// Sidecar metadata written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: ModelConfig,
    pub parameter_count: usize,
    /// Free-form provenance: what produced the checkpoint and from what.
    pub provenance: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save(path: &Path, model: &Model, provenance: serde_json::Value) -> AppResult<()> {
    write_bytes(path, &encode(model)?)?;
    write_json(
        &sidecar_path(path),
        &Sidecar {
            config: model.cfg.clone(),
            parameter_count: model.params.count(),
            provenance,
        },
    )
}

pub fn load(path: &Path) -> AppResult<Model> {
    let bytes = std::fs::read(path).map_err(AppError::io(path))?;
    decode(&bytes, path)
}

pub fn load_sidecar(path: &Path) -> AppResult<Sidecar> {
    read_json(&sidecar_path(path))
}
