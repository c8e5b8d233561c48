//! Binary parameter checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u8` dtype (bytes per value),
//! `u32` header length, a JSON header with the architecture, then the raw
//! little-endian parameters. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingConfig, FieldParams, NetworkConfig, Real};
use crate::io_util::{read, write_atomic};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"NESDFMAP";
const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 1 + 4;

/// Element type stored in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn of<T: Real>() -> Self {
        if T::BYTES == 4 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    embedding: EmbeddingConfig,
    network: NetworkConfig,
    /// `[inputs, outputs]` per layer.
    layers: Vec<[usize; 2]>,
    num_params: usize,
}

pub(crate) fn encode<T: Real>(params: &FieldParams<T>) -> Result<Vec<u8>> {
    let header = Header {
        embedding: params.embedding().clone(),
        network: params.network().clone(),
        layers: params.shapes().iter().map(|s| [s.inp, s.out]).collect(),
        num_params: params.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + params.len() * T::BYTES as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::BYTES);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn preamble(bytes: &[u8]) -> Result<(Dtype, usize)> {
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = match bytes[12] {
        4 => Dtype::F32,
        8 => Dtype::F64,
        other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
    };
    let len = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
    Ok((dtype, len))
}

pub(crate) fn decode<T: Real>(bytes: &[u8]) -> Result<FieldParams<T>> {
    let (dtype, header_len) = preamble(bytes)?;
    if dtype != Dtype::of::<T>() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {dtype:?}, requested {:?}",
            Dtype::of::<T>()
        )));
    }
    let body = PREAMBLE + header_len;
    if bytes.len() < body {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.embedding.validate("embedding").map_err(|e| Error::Checkpoint(e.to_string()))?;
    header.network.validate("network").map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected = FieldParams::<T>::zeros(header.embedding.clone(), header.network.clone());
    let shapes: Vec<[usize; 2]> = expected.shapes().iter().map(|s| [s.inp, s.out]).collect();
    if shapes != header.layers || expected.len() != header.num_params {
        return Err(Error::Shape(format!(
            "checkpoint layers {:?} do not match its architecture {:?}",
            header.layers, shapes
        )));
    }
    let width = T::BYTES as usize;
    let raw = &bytes[body..];
    if raw.len() != header.num_params * width {
        return Err(Error::Shape(format!(
            "expected {} parameter bytes, found {}",
            header.num_params * width,
            raw.len()
        )));
    }
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    FieldParams::from_parts(header.embedding, header.network, data)
}

/// Writes `params` atomically to `path`.
pub fn save_checkpoint<T: Real>(path: &Path, params: &FieldParams<T>) -> Result<()> {
    write_atomic(path, &encode(params)?)
}

/// Reads a checkpoint written with the same element type.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<FieldParams<T>> {
    decode(&read(path)?)
}

/// Element type of the checkpoint at `path`.
pub fn checkpoint_dtype(path: &Path) -> Result<Dtype> {
    Ok(preamble(&read(path)?)?.0)
}

impl<T: Real> FieldParams<T> {
    /// Fails unless `self` has exactly the given architecture.
    pub fn expect_architecture(&self, embedding: &EmbeddingConfig, network: &NetworkConfig) -> Result<()> {
        if self.embedding() != embedding || self.network() != network {
            return Err(Error::Shape(format!(
                "map architecture {:?}/{:?} differs from configured {:?}/{:?}",
                self.network(),
                self.embedding().frequencies,
                network,
                embedding.frequencies
            )));
        }
        Ok(())
    }
}
