//! Versioned tensor container.
//!
//! A checkpoint is two files sharing a stem: `<stem>.json` holds the manifest
//! (format tag, version, kind, free-form metadata, and the tensor table with
//! name, shape, dtype and byte offset) and `<stem>.bin` holds the raw
//! little-endian arrays back to back in table order.
//!
//! Supported dtypes are `f32`, `f64` and `u32`. Writing `f32` from `f64`
//! values fails unless every value is exactly representable, so a stored
//! tensor always reloads bit-identically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{GrappaError, Result};

pub const FORMAT_TAG: &str = "grappa-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Float(Array2<f64>),
    Index(Vec<u32>),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: Vec<(String, DType, TensorData)>,
}

/// Paths of the manifest and payload for a checkpoint stem.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `bytes` to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| GrappaError::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| GrappaError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| GrappaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| GrappaError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| GrappaError::io(path, e))
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push_float(&mut self, name: impl Into<String>, dtype: DType, value: Array2<f64>) {
        self.tensors.push((name.into(), dtype, TensorData::Float(value)));
    }

    pub fn push_index(&mut self, name: impl Into<String>, value: Vec<u32>) {
        self.tensors.push((name.into(), DType::U32, TensorData::Index(value)));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    fn find(&self, name: &str) -> Result<&TensorData> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, d)| d)
            .ok_or_else(|| GrappaError::Checkpoint(format!("tensor `{name}` missing")))
    }

    /// Fetches a float tensor and checks its shape.
    pub fn float(&self, name: &str, shape: (usize, usize)) -> Result<Array2<f64>> {
        match self.find(name)? {
            TensorData::Float(a) if a.dim() == shape => Ok(a.clone()),
            TensorData::Float(a) => Err(GrappaError::Shape(format!(
                "tensor `{name}` has shape {:?}, config expects {:?}",
                a.dim(),
                shape
            ))),
            TensorData::Index(_) => Err(GrappaError::Checkpoint(format!(
                "tensor `{name}` is an index array"
            ))),
        }
    }

    /// Fetches a float tensor with whatever shape was stored.
    pub fn float_unshaped(&self, name: &str) -> Result<Array2<f64>> {
        match self.find(name)? {
            TensorData::Float(a) => Ok(a.clone()),
            TensorData::Index(_) => Err(GrappaError::Checkpoint(format!(
                "tensor `{name}` is an index array"
            ))),
        }
    }

    pub fn index(&self, name: &str) -> Result<Vec<u32>> {
        match self.find(name)? {
            TensorData::Index(v) => Ok(v.clone()),
            TensorData::Float(_) => Err(GrappaError::Checkpoint(format!(
                "tensor `{name}` is not an index array"
            ))),
        }
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (manifest_path, bin_path) = checkpoint_paths(stem);
        let mut payload: Vec<u8> = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, dtype, data) in &self.tensors {
            let offset = payload.len() as u64;
            let shape = match data {
                TensorData::Float(a) => {
                    let (r, c) = a.dim();
                    for &v in a.iter() {
                        match dtype {
                            DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                            DType::F32 => {
                                let narrow = v as f32;
                                if f64::from(narrow).to_bits() != v.to_bits() {
                                    return Err(GrappaError::Checkpoint(format!(
                                        "tensor `{name}` holds values not representable as f32"
                                    )));
                                }
                                payload.extend_from_slice(&narrow.to_le_bytes());
                            }
                            DType::U32 => {
                                return Err(GrappaError::Checkpoint(format!(
                                    "tensor `{name}`: float data cannot be stored as u32"
                                )))
                            }
                        }
                    }
                    vec![r, c]
                }
                TensorData::Index(v) => {
                    for &x in v {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                    vec![v.len()]
                }
            };
            entries.push(TensorEntry {
                name: name.clone(),
                shape,
                dtype: *dtype,
                offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        write_atomic(&bin_path, &payload)?;
        write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest_path, bin_path) = checkpoint_paths(stem);
        let text = fs::read(&manifest_path).map_err(|e| GrappaError::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        if manifest.format != FORMAT_TAG {
            return Err(GrappaError::Checkpoint(format!(
                "unknown format tag `{}`",
                manifest.format
            )));
        }
        if manifest.version != FORMAT_VERSION {
            return Err(GrappaError::Checkpoint(format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                manifest.version
            )));
        }
        let payload = fs::read(&bin_path).map_err(|e| GrappaError::io(&bin_path, e))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + count * entry.dtype.width();
            let bytes = payload.get(start..end).ok_or_else(|| {
                GrappaError::Checkpoint(format!("tensor `{}` overruns payload", entry.name))
            })?;
            let data = match entry.dtype {
                DType::U32 => TensorData::Index(
                    bytes
                        .chunks_exact(4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                DType::F32 | DType::F64 => {
                    let values: Vec<f64> = if entry.dtype == DType::F32 {
                        bytes
                            .chunks_exact(4)
                            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
                            .collect()
                    } else {
                        bytes
                            .chunks_exact(8)
                            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                            .collect()
                    };
                    let (r, c) = match entry.shape.as_slice() {
                        [r, c] => (*r, *c),
                        [n] => (1, *n),
                        other => {
                            return Err(GrappaError::Checkpoint(format!(
                                "tensor `{}` has unsupported rank {}",
                                entry.name,
                                other.len()
                            )))
                        }
                    };
                    TensorData::Float(
                        Array2::from_shape_vec((r, c), values)
                            .map_err(|e| GrappaError::Shape(e.to_string()))?,
                    )
                }
            };
            tensors.push((entry.name.clone(), entry.dtype, data));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }
}
