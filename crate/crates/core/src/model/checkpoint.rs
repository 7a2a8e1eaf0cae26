//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "WEENDCKP"            8 bytes
//! version                      u32
//! config length, config JSON   u64, bytes
//! tensor count                 u32
//! per tensor: name length, name (UTF-8), frozen flag, rows, cols, rows·cols f64
//!             u32,         bytes,        u8,          u64,  u64,  f64…
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

const MAGIC: &[u8; 8] = b"WEENDCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&params.config)?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    let named = params.named_params();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, _, p) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::from(p.frozen)])?;
        let (r, c) = p.shape();
        w.write_all(&(r as u64).to_le_bytes())?;
        w.write_all(&(c as u64).to_le_bytes())?;
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint, rejecting any tensor whose name or shape does not match
/// the layout implied by the embedded config.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config: ModelConfig = serde_json::from_slice(&cfg)?;
    config.validate()?;

    let count = read_u32(&mut r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.insert(name, (flag[0] != 0, Tensor2::new(rows, cols, data)?));
    }

    let mut params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected = params.named_params().len();
    if tensors.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config implies {expected}",
            tensors.len()
        )));
    }
    for (name, _, p) in params.named_params_mut() {
        let (frozen, value) = tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if value.shape() != p.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                value.shape(),
                p.shape()
            )));
        }
        p.value = value;
        p.frozen = frozen;
        p.zero_grad();
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
