//! Versioned binary weight files.
//!
//! Layout, all integers little-endian:
//! `b"EFCK"`, `u32` version, `u32` config length, config text (the
//! `key=value` form of [`ExperimentConfig`]), `u32` tensor count, then per
//! tensor: `u32` name length, name, `u32` rank, `u64` extents, `f32` values.

use std::fs;
use std::path::Path;

use easyfirst_tensor::{Element, Tensor};

use crate::config::ExperimentConfig;
use crate::model::Model;
use crate::params::ParamStore;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EFCK";
pub const VERSION: u32 = 1;

pub fn encode<T: Element>(config: &ExperimentConfig, params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, value) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save<T: Element>(
    path: &Path,
    config: &ExperimentConfig,
    params: &ParamStore<T>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(config, params))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Named tensors as stored, plus the config echo.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(ExperimentConfig, Vec<(String, Tensor<T>)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = ExperimentConfig::from_text(&r.string()?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let tensor =
            Tensor::from_vec(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((config, tensors))
}

/// Rebuilds the model from the echoed config and installs the stored
/// weights. Every parameter must be present exactly once.
pub fn load<T: Element>(path: &Path) -> Result<(ExperimentConfig, Model<T>, ParamStore<T>)> {
    let bytes =
        fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<(ExperimentConfig, Model<T>, ParamStore<T>)> {
    let (config, tensors) = decode::<T>(bytes)?;
    let (model, mut params) = Model::build(&config.model, 0)?;
    if tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "file holds {} tensors, model has {}",
            tensors.len(),
            params.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for (name, tensor) in tensors {
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        params.assign(&name, tensor)?;
    }
    Ok((config, model, params))
}
