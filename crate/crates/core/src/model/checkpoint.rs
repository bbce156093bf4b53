//! Versioned checkpoint container.
//!
//! ```text
//! magic            8 bytes   "FILMCKPT"
//! format_version   u32 LE
//! header_len       u64 LE
//! header           header_len bytes of JSON: format_version, model config,
//!                  tensor index (name, shape, byte offset, element count),
//!                  free-form metadata
//! data             little-endian f32 arrays at the indexed offsets
//! ```
//!
//! Offsets are relative to the start of the data section. Reading and
//! re-writing a checkpoint reproduces it byte for byte.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Transformer};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FILMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    /// Anything else a consumer needs to use the weights (vocabulary,
    /// length distribution, training objective, step).
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn from_model<F: Scalar>(model: &Transformer<F>) -> Self {
        Self {
            config: model.config().clone(),
            tensors: model
                .names()
                .iter()
                .cloned()
                .zip(model.params().iter().map(Tensor::cast))
                .collect(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_model<F: Scalar>(&self) -> Result<Transformer<F>> {
        let expected = self.config.param_shapes();
        for ((name, _), (got, _)) in expected.iter().zip(&self.tensors) {
            if name != got {
                return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{got}`")));
            }
        }
        Transformer::from_parts(
            self.config.clone(),
            self.tensors.iter().map(|(_, t)| t.cast()).collect(),
        )
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        self.metadata
            .get(key)
            .map(|v| serde_json::from_value(v.clone()).map_err(Error::from))
            .transpose()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len() as u64,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors,
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        if header.format_version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let data = &bytes[header_end..];
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.offset != expected_offset || e.shape.iter().product::<usize>() as u64 != e.len {
                return Err(Error::Checkpoint(format!("inconsistent index entry for `{}`", e.name)));
            }
            let start = e.offset as usize;
            let end = start + 4 * e.len as usize;
            let raw = data
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past end of file", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), values)?));
            expected_offset = end as u64;
        }
        if expected_offset as usize != data.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            config: header.config,
            tensors,
            metadata: header.metadata,
        })
    }

    /// Write via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
