//! Checkpoint files: `"TACK"`, a u32 format version, a length-prefixed JSON
//! echo of the encoder configuration and cache dimensions, a u64 parameter
//! count, then the parameters as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ModelState};
use crate::bytes::ByteReader;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TACK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    encoder: EncoderConfig,
    text_dim: usize,
    image_dim: usize,
}

pub fn checkpoint_bytes(state: &ModelState) -> Vec<u8> {
    let echo = serde_json::to_vec(&ConfigEcho {
        encoder: state.config.clone(),
        text_dim: state.text_dim,
        image_dim: state.image_dim,
    })
    .expect("config serializes");
    let mut out = Vec::with_capacity(20 + echo.len() + 8 * state.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(&echo);
    out.extend_from_slice(&(state.params.len() as u64).to_le_bytes());
    for p in &state.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let mut r = ByteReader::new(bytes, path);
    r.expect_magic(MAGIC, "checkpoint")?;
    if r.u32()? != VERSION {
        return Err(r.corrupt("unsupported checkpoint version"));
    }
    let echo_len = r.u32()? as usize;
    let echo: ConfigEcho = serde_json::from_slice(r.take(echo_len)?).map_err(|_| r.corrupt("bad config echo"))?;
    let count = r.u64()? as usize;
    let params = r.f64s(count)?;
    r.finish()?;
    ModelState::from_params(&echo.encoder, echo.text_dim, echo.image_dim, params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

/// Loads a checkpoint and checks that it was produced for `config`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, config: &EncoderConfig) -> Result<ModelState> {
    let state = load_checkpoint(path)?;
    if &state.config != config {
        return Err(Error::LayoutMismatch(format!(
            "checkpoint encoder {:?} (embed_dim {}) does not match configured encoder {:?} (embed_dim {})",
            state.config.point_feature_dims, state.config.embed_dim, config.point_feature_dims, config.embed_dim
        )));
    }
    Ok(state)
}
