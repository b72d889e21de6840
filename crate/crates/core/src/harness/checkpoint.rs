//! Binary checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic  b"ATSHCKPT"
//! version
//! header_len, header (UTF-8 JSON: {"kind": "encoder"|"lm", "config": {...}})
//! num_blocks
//! per block: name_len, name (UTF-8), rows, cols, rows*cols f32 LE
//! ```
//!
//! Blocks appear in the model's fixed parameter order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::generation::{LmConfig, LmModel};
use crate::tensor::Matrix;
use crate::transformer::ParamSet;

pub const MAGIC: &[u8; 8] = b"ATSHCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelConfig {
    Encoder(EncoderConfig),
    Lm(LmConfig),
}

#[derive(Debug, Clone)]
pub enum Checkpoint {
    Encoder(EncoderModel<f32>),
    Lm(LmModel<f32>),
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(config: &ModelConfig, params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(config)?;
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, params.len())?;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rows())?;
        put_u32(&mut out, t.cols())?;
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedFile)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ParamSet<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let header_len = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(header_len)?)?;
    let num_blocks = r.len()?;
    let mut params = ParamSet { names: Vec::new(), tensors: Vec::new() };
    for _ in 0..num_blocks {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?
            .to_string();
        let rows = r.len()?;
        let cols = r.len()?;
        let count = rows.checked_mul(cols).ok_or(Error::TruncatedFile)?;
        let raw = r.take(count.checked_mul(4).ok_or(Error::TruncatedFile)?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.names.push(name);
        params.tensors.push(Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, params))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = match checkpoint {
        Checkpoint::Encoder(m) => encode(&ModelConfig::Encoder(m.config().clone()), m.params())?,
        Checkpoint::Lm(m) => encode(&ModelConfig::Lm(m.config().clone()), m.params())?,
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (config, params) = decode(&bytes)?;
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(match config {
        ModelConfig::Encoder(c) => Checkpoint::Encoder(EncoderModel::from_params(c, params)?),
        ModelConfig::Lm(c) => Checkpoint::Lm(LmModel::from_params(c, params)?),
    })
}

pub fn save_encoder(model: &EncoderModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(&Checkpoint::Encoder(model.clone()), path)
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<EncoderModel<f32>> {
    match load_checkpoint(path)? {
        Checkpoint::Encoder(m) => Ok(m),
        Checkpoint::Lm(_) => Err(Error::Checkpoint("expected an encoder checkpoint, found a language model".into())),
    }
}

pub fn save_lm(model: &LmModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(&Checkpoint::Lm(model.clone()), path)
}

pub fn load_lm(path: impl AsRef<Path>) -> Result<LmModel<f32>> {
    match load_checkpoint(path)? {
        Checkpoint::Lm(m) => Ok(m),
        Checkpoint::Encoder(_) => Err(Error::Checkpoint("expected a language-model checkpoint, found an encoder".into())),
    }
}
