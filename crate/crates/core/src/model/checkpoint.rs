//! Binary checkpoint container: the magic `TKTRCKPT`, a little-endian `u64` header length,
//! a JSON header (configs, step, tensor manifest) and little-endian `f32` payloads.
//!
//! Optimizer moments are stored as ordinary tensors named `adam.m.<param>` / `adam.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Model, ModelConfig};
use super::tensor::Matrix;
use super::train::{AdamState, TrainConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TKTRCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub state: AdamState,
    /// Free-form run metadata (vocabulary, window settings, ...).
    pub meta: serde_json::Value,
}

fn bad(msg: impl ToString) -> Error {
    Error::parse("checkpoint", msg)
}

pub fn to_bytes(
    model: &Model,
    train: &TrainConfig,
    state: &AdamState,
    meta: &serde_json::Value,
) -> Vec<u8> {
    let store = model.params();
    let mut named: Vec<(String, &Matrix)> = Vec::new();
    for (name, t) in store.names().iter().zip(store.tensors()) {
        named.push((name.clone(), t));
    }
    for (name, t) in store.names().iter().zip(&state.m) {
        named.push((format!("adam.m.{name}"), t));
    }
    for (name, t) in store.names().iter().zip(&state.v) {
        named.push((format!("adam.v.{name}"), t));
    }
    let mut tensors = Vec::with_capacity(named.len());
    let mut payload = Vec::new();
    for (name, t) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: [t.rows, t.cols],
            offset: payload.len(),
        });
        for &x in &t.data {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let header = Header {
        version: VERSION,
        model: model.config().clone(),
        train: train.clone(),
        step: state.step,
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing TKTRCKPT magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| bad("header length overflows"))?;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(bad("header length exceeds file size"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let payload = &body[hlen..];
    header.model.validate()?;
    header.train.validate()?;
    let expected = header.model.param_count().saturating_mul(3);
    if expected.saturating_mul(4) > payload.len() {
        return Err(bad("payload smaller than the configured model"));
    }

    let read = |entry: &TensorEntry| -> Result<Matrix> {
        let [rows, cols] = entry.shape;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| bad("tensor shape overflows"))?;
        let end = n
            .checked_mul(4)
            .and_then(|b| b.checked_add(entry.offset))
            .ok_or_else(|| bad("tensor extent overflows"))?;
        if end > payload.len() {
            return Err(bad(format!(
                "tensor `{}` runs past the payload",
                entry.name
            )));
        }
        let data = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Matrix::from_vec(rows, cols, data))
    };
    let find = |name: &str, like: &Matrix| -> Result<Matrix> {
        let entry = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| bad(format!("tensor `{name}` missing")))?;
        let m = read(entry)?;
        if m.shape() != like.shape() {
            return Err(bad(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                m.shape(),
                like.shape()
            )));
        }
        Ok(m)
    };

    let mut model = Model::new(header.model.clone())?;
    let names = model.params().names().to_vec();
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let like = model.params().tensors()[i].clone();
        model.params_mut().tensors_mut()[i] = find(name, &like)?;
        m.push(find(&format!("adam.m.{name}"), &like)?);
        v.push(find(&format!("adam.v.{name}"), &like)?);
    }
    Ok(Checkpoint {
        model,
        train: header.train,
        state: AdamState {
            step: header.step,
            m,
            v,
        },
        meta: header.meta,
    })
}

/// Writes via a temporary sibling and rename, so an interrupted save keeps the old file.
pub fn save(
    path: &Path,
    model: &Model,
    train: &TrainConfig,
    state: &AdamState,
    meta: &serde_json::Value,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(model, train, state, meta)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
