//! Binary checkpoint format, little-endian throughout:
//!
//! | bytes    | content                                   |
//! |----------|-------------------------------------------|
//! | 8        | magic `MUSFCKPT`                          |
//! | 4        | format version (u32), currently 1         |
//! | 4        | config length `n` (u32)                   |
//! | n        | `ModelConfig` as UTF-8 JSON               |
//! | 8        | parameter count `m` (u64)                 |
//! | 4 m      | parameters as f32 in canonical order      |
//! | 32       | SHA-256 of everything above               |

use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ModelParams;
use super::{ModelConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"MUSFCKPT";
pub const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams<f32>) -> Vec<u8> {
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    let count = params.num_params();
    let mut out = Vec::with_capacity(8 + 4 + 4 + config.len() + 8 + 4 * count + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for t in params.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], ModelError> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>, ModelError> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8)? != MAGIC {
        return Err(bad("wrong magic bytes"));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let config: ModelConfig =
        serde_json::from_slice(take(bytes, &mut pos, len)?).map_err(|e| bad(format!("config: {e}")))?;
    config.validate()?;
    let count = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let mut params = ModelParams::<f32>::zeros(&config);
    if count != params.num_params() {
        return Err(bad(format!("{count} parameters, config needs {}", params.num_params())));
    }
    let body = take(bytes, &mut pos, count.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
    let trailer = take(bytes, &mut pos, 32)?;
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    if Sha256::digest(&bytes[..pos - 32]).as_slice() != trailer {
        return Err(bad("checksum mismatch"));
    }
    let mut values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = values.next().expect("counted");
        }
    }
    Ok(params)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams<f32>, ModelError> {
    load_checkpoint(&std::fs::read(path)?)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams<f32>) -> Result<(), ModelError> {
    std::fs::write(path, save_checkpoint(params))?;
    Ok(())
}
