//! `TEA-CKPT-1` checkpoint files.
//!
//! ```text
//! "TEA-CKPT-1\n"
//! u32 meta_len, meta_len bytes of JSON (model spec, run config, epoch)
//! u32 n_tensors
//! per tensor: u32 name_len, name, u32 rank, rank × u64 dims, f64 values
//! ```
//! Every integer and float is little-endian.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelSpec, TeaModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "TEA-CKPT-1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint: expected header {CHECKPOINT_MAGIC:?}, found {found:?}")]
    BadHeader { found: String },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match its model spec: {0}")]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    /// Effective run configuration.
    pub config: serde_json::Value,
    /// Epoch the parameters come from; `None` for an untrained model.
    pub epoch: Option<usize>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn encode(model: &TeaModel, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    let json = serde_json::to_vec(meta).expect("meta serializes");
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    put_u32(&mut out, model.params.len());
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(TeaModel, CheckpointMeta), CheckpointError> {
    let header_len = CHECKPOINT_MAGIC.len() + 1;
    let head = &bytes[..bytes.len().min(header_len)];
    if head.len() < header_len || &head[..header_len - 1] != CHECKPOINT_MAGIC.as_bytes() || head[header_len - 1] != b'\n' {
        return Err(CheckpointError::BadHeader {
            found: String::from_utf8_lossy(head).trim_end().to_string(),
        });
    }
    let mut r = Reader {
        buf: &bytes[header_len..],
    };
    let meta_len = r.u32("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
    let n = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name_len = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor shape")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape overflows")))?;
        let raw = r.take(len.checked_mul(8).ok_or(CheckpointError::Truncated("tensor values"))?, "tensor values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if store.find(&name).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
        }
        store.insert(&name, Tensor::new(shape, data).expect("length checked"));
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.buf.len())));
    }
    let model = TeaModel::from_params(meta.spec, store)?;
    Ok((model, meta))
}

pub fn write_checkpoint(path: &Path, model: &TeaModel, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    fs::write(path, encode(model, meta)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<(TeaModel, CheckpointMeta), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
