//! Single-file parameter checkpoints.
//!
//! Layout: one version byte, a little-endian `u32` manifest length, the JSON
//! manifest (per parameter: name, shape, dtype; plus free-form metadata),
//! then the raw little-endian buffers in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use ebwm_autodiff::NdArray;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::params::Params;

pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<Entry>,
    #[serde(default)]
    meta: Value,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serialize parameters (stored as f64) with metadata.
pub fn to_bytes(params: &Params, meta: &Value) -> Vec<u8> {
    let manifest = Manifest {
        entries: params
            .iter()
            .map(|(name, v)| Entry {
                name: name.into(),
                shape: v.shape().to_vec(),
                dtype: Dtype::F64,
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = vec![VERSION];
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.values() {
        for x in v.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Params, Value)> {
    let (&version, rest) = bytes.split_first().ok_or_else(|| corrupt("empty file"))?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    if rest.len() < 4 {
        return Err(corrupt("truncated manifest length"));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&rest[..len]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let mut buf = &rest[len..];
    let mut params = Params::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let need = n * e.dtype.width();
        if buf.len() < need {
            return Err(corrupt(format!("buffer of {} is truncated", e.name)));
        }
        let data: Vec<f64> = match e.dtype {
            Dtype::F64 => buf[..need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => buf[..need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        params.insert(e.name.clone(), NdArray::new(&e.shape, data)?);
        buf = &buf[need..];
    }
    if !buf.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", buf.len())));
    }
    Ok((params, manifest.meta))
}

pub fn save(path: &Path, params: &Params, meta: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(params, meta))
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Params, Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
