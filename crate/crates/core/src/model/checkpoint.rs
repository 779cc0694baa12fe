//! Binary checkpoint format.
//!
//! Layout: the magic bytes `MDKD`, one format-version byte, the JSON header
//! length as a little-endian `u64`, the JSON header (model configuration and
//! parameter manifest), then every parameter as little-endian `f64` values
//! in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderModel, ModelConfig, Param};
use crate::error::{with_path, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDKD";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the parameter block.
    offset: usize,
}

impl EncoderModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let params = self
            .params
            .iter()
            .map(|p| {
                let entry = ManifestEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    offset,
                };
                offset += p.tensor.numel() * 8;
                entry
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            params,
        })?;
        let mut out = Vec::with_capacity(13 + header.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for x in p.tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("invalid checkpoint: {msg}"));
        if bytes.len() < 13 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing MDKD magic"));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[4])));
        }
        let header_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let body_start = 13usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[13..body_start])?;
        let body = &bytes[body_start..];
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let numel: usize = entry.shape.iter().product();
            let end = entry.offset + numel * 8;
            if end > body.len() {
                return Err(bad(&format!("parameter {} runs past end of file", entry.name)));
            }
            let data = body[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(Param {
                name: entry.name,
                tensor: Tensor::new(entry.shape, data)?,
            });
        }
        EncoderModel::from_params(header.config, params)
    }
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save_checkpoint(model: &EncoderModel, path: &Path) -> Result<()> {
    let bytes = model.to_bytes()?;
    let tmp = path.with_extension("tmp-ckpt");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel> {
    EncoderModel::from_bytes(&fs::read(path).map_err(with_path(path))?)
}
