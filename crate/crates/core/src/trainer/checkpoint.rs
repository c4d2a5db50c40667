//! `VGCK` checkpoints: magic, `u16` version, then named little-endian
//! binary32 tensors until end of file.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use crate::scalar::Scalar;

use super::model::{ModelDims, ModelParams};

pub const MAGIC: &[u8; 4] = b"VGCK";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated inside tensor `{0}`")]
    Truncated(String),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("unexpected tensor `{0}`")]
    Unexpected(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_checkpoint<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * params.num_parameters() + 256);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data {
            out.extend_from_slice(&x.to_f32_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

type RawTensors = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn read_tensors(bytes: &[u8]) -> Result<RawTensors, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).ok_or_else(|| CheckpointError::Truncated("header".into()))?;
    if magic != MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(magic);
        return Err(CheckpointError::BadMagic(m));
    }
    let version = r.u16().ok_or_else(|| CheckpointError::Truncated("header".into()))?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut tensors = BTreeMap::new();
    while r.pos < bytes.len() {
        let trunc = || CheckpointError::Truncated("<name>".into());
        let len = r.u16().ok_or_else(trunc)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(trunc)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let trunc = || CheckpointError::Truncated(name.clone());
        let rank = r.take(1).ok_or_else(trunc)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(trunc)?;
        let count: usize = shape.iter().product();
        let data = r
            .take(count.checked_mul(4).ok_or_else(trunc)?)
            .ok_or_else(trunc)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(CheckpointError::Duplicate(name));
        }
    }
    Ok(tensors)
}

fn dim_of(t: &RawTensors, name: &str, axis: usize) -> Result<usize, CheckpointError> {
    let (shape, _) = t.get(name).ok_or_else(|| CheckpointError::Missing(name.into()))?;
    shape.get(axis).copied().ok_or_else(|| CheckpointError::Shape {
        name: name.into(),
        expected: vec![0, 0],
        found: shape.clone(),
    })
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>, CheckpointError> {
    let mut raw = read_tensors(bytes)?;
    let dims = ModelDims {
        input: dim_of(&raw, "gate.w", 1)?,
        hidden: dim_of(&raw, "projector.0.w", 0)?,
        embed: dim_of(&raw, "projector.2.w", 0)?,
        classes: dim_of(&raw, "classifier.2.w", 0)?,
    };
    let mut params = ModelParams::<T>::zeros(dims);
    for t in params.tensors_mut() {
        let (shape, data) = raw
            .remove(&t.name)
            .ok_or_else(|| CheckpointError::Missing(t.name.clone()))?;
        if shape != t.shape {
            return Err(CheckpointError::Shape {
                name: t.name,
                expected: t.shape,
                found: shape,
            });
        }
        for (d, x) in t.data.iter_mut().zip(data) {
            *d = T::widen(x);
        }
    }
    if let Some(name) = raw.into_keys().next() {
        return Err(CheckpointError::Unexpected(name));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
