//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "MLMSDACK"
//! version     u32
//! config_hash u32 length + UTF-8
//! arch        u32 length + UTF-8 JSON of ArchConfig
//! n_params    u32
//! n_params × { name: u32 length + UTF-8, rank: u32, dims: rank × u64, data: f64 × numel }
//! ```
//!
//! Parameters appear in declaration order. Decoding then re-encoding yields
//! the same bytes.

use std::fs;
use std::path::Path;

use super::MlMsdaModel;
use crate::autodiff::Tensor;
use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MLMSDACK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &MlMsdaModel, config_hash: &str) -> Result<Vec<u8>> {
    let mut e = Encoder::default();
    e.bytes(MAGIC);
    e.u32(CHECKPOINT_VERSION);
    e.str(config_hash);
    e.str(&serde_json::to_string(model.config())?);
    e.u32(model.params().len() as u32);
    for p in model.params() {
        e.str(&p.name);
        e.u32(p.value.rank() as u32);
        p.value.shape().iter().for_each(|&d| e.u64(d as u64));
        e.f64s(p.value.data());
    }
    Ok(e.buf)
}

/// Decodes a checkpoint, returning the model and the embedded config hash.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(MlMsdaModel, String)> {
    let mut d = Decoder::new(bytes);
    if d.take(MAGIC.len())? != MAGIC {
        return Err(Error::Malformed("not a checkpoint (bad magic)".into()));
    }
    let version = d.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hash = d.str()?;
    let arch = serde_json::from_str(&d.str()?).map_err(|e| Error::Malformed(format!("arch: {e}")))?;
    let mut model = MlMsdaModel::zeros(&arch)?;
    let n = d.u32()? as usize;
    if n != model.params().len() {
        return Err(Error::Malformed(format!(
            "{n} parameter arrays, architecture needs {}",
            model.params().len()
        )));
    }
    for p in model.params_mut() {
        let name = d.str()?;
        if name != p.name {
            return Err(Error::Malformed(format!("expected parameter {}, found {name}", p.name)));
        }
        let rank = d.u32()? as usize;
        let dims = (0..rank)
            .map(|_| d.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != p.value.shape() {
            return Err(Error::Malformed(format!(
                "{name}: shape {dims:?}, expected {:?}",
                p.value.shape()
            )));
        }
        let numel = dims.iter().product();
        p.value = Tensor::new(dims, d.f64s(numel)?)?;
    }
    d.finish()?;
    Ok((model, hash))
}

pub fn save_checkpoint(model: &MlMsdaModel, config_hash: &str, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(model, config_hash)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MlMsdaModel, String)> {
    read_checkpoint(&fs::read(path)?)
}
