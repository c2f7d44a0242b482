//! `FVCK1` checkpoint container: magic line, length-prefixed JSON manifest,
//! then raw little-endian `f32` data in manifest order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"FVCK1\n";

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Writes `store` with an optional model config embedded under `"config"`.
pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore<f32>, config: Option<serde_json::Value>) -> Result<()> {
    let manifest = Manifest {
        tensors: store.iter().map(|(n, t)| Entry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
        config,
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in store.iter() {
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format { path: "<checkpoint>".into(), msg: msg.into() }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore<f32>, Option<serde_json::Value>)> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not an FVCK1 checkpoint"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| bad("truncated manifest length"))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|_| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let mut store = ParamStore::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| bad(format!("truncated data for {}", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok((store, manifest.config))
}
