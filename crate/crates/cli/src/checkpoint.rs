//! SYMT checkpoint files.
//!
//! Layout, little-endian: magic `SYMT`, version `u32`, config length `u32`, canonical
//! config JSON, Adam step `u64`, tensor count `u32`, then per tensor: name length
//! `u32`, UTF-8 name, rank `u32`, extents `u32 × rank`, `f32` values. Parameters come
//! first in declaration order, followed by `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::path::Path;

use symtrans_core::model::SymTrans;
use symtrans_core::optim::AdamState;
use symtrans_core::params::{ParamLayout, ParamStore};
use symtrans_core::train::{TrainConfig, TrainState};
use symtrans_core::Tensor;

use crate::config::canonical;
use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"SYMT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic, expected \"SYMT\"")]
    BadMagic,
    #[error("unsupported checkpoint version {0}, expected {VERSION}")]
    BadVersion(u32),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("tensor {index}: expected `{expected}` {expected_shape:?}, found `{found}` {found_shape:?}")]
    TensorMismatch {
        index: usize,
        expected: String,
        expected_shape: Vec<usize>,
        found: String,
        found_shape: Vec<usize>,
    },
    #[error("expected {expected} tensors, found {found}")]
    TensorCount { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState<f32>,
}

fn names(layout: &ParamLayout) -> Vec<(String, Vec<usize>)> {
    let params: Vec<(String, Vec<usize>)> = layout.specs().iter().map(|s| (s.name.clone(), s.shape.clone())).collect();
    let mut all = params.clone();
    for prefix in ["adam.m.", "adam.v."] {
        all.extend(params.iter().map(|(n, s)| (format!("{}{}", prefix, n), s.clone())));
    }
    all
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(config: &TrainConfig, layout: &ParamLayout, state: &TrainState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = canonical(config);
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&state.adam.step.to_le_bytes());
    let tensors = state.params.tensors().iter().chain(&state.adam.m).chain(&state.adam.v);
    let names = names(layout);
    put_u32(&mut out, names.len() as u32);
    for ((name, _), t) in names.iter().zip(tensors) {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &e in t.shape() {
            put_u32(&mut out, e as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let config: TrainConfig = serde_json::from_str(text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    config.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
    let model = SymTrans::new(&config.model).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let step = r.u64()?;
    let expected = names(&model.layout);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(CheckpointError::TensorCount {
            expected: expected.len(),
            found: count,
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for (index, (name, shape)) in expected.into_iter().enumerate() {
        let n = r.u32()? as usize;
        let found = String::from_utf8_lossy(r.take(n)?).into_owned();
        let rank = r.u32()? as usize;
        let found_shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
        if found != name || found_shape != shape {
            return Err(CheckpointError::TensorMismatch {
                index,
                expected: name,
                expected_shape: shape,
                found,
                found_shape,
            });
        }
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data).expect("numel matches"));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    let k = model.layout.len();
    let v = tensors.split_off(2 * k);
    let m = tensors.split_off(k);
    Ok(Checkpoint {
        config,
        state: TrainState {
            params: ParamStore::from_tensors(tensors),
            adam: AdamState { m, v, step },
        },
    })
}

pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write(path: impl AsRef<Path>, config: &TrainConfig, layout: &ParamLayout, state: &TrainState<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(config, layout, state)).map_err(|e| CliError::io(path, e))
}
