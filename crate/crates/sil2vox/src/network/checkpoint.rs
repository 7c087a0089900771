//! Checkpoint serialization.
//!
//! Layout: the magic `SNW1`, a little-endian u32 header length, a JSON
//! header (dtype, spec, step, config hash, tensor names and shapes in
//! write order), then every tensor's values as little-endian scalars in
//! that same order. Loading re-derives the expected shapes from the spec
//! and rejects any mismatch, so a corrupt header cannot produce a
//! silently misshapen network.

use super::{init_params, NetworkError, NetworkSpec, Result, StackedParams};
use crate::tensor::{Dtype, Scalar, Tensor};

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SNW1";

/// Bookkeeping stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Optimizer steps taken when the snapshot was written.
    pub step: u64,
    /// Hash of the training configuration that produced the weights.
    pub config_hash: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: Dtype,
    spec: NetworkSpec,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn io_err(path: &Path, source: std::io::Error) -> NetworkError {
    NetworkError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> NetworkError {
    NetworkError::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

fn tensor_order<T: Scalar>(params: &StackedParams<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out = Vec::new();
    for (si, stage) in params.stages.iter().enumerate() {
        for (li, layer) in stage.layers.iter().enumerate() {
            out.push((format!("stage{si}/layer{li}/weight"), &layer.weight));
            out.push((format!("stage{si}/layer{li}/bias"), &layer.bias));
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    params: &StackedParams<T>,
    meta: CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    params.spec.validate()?;
    let order = tensor_order(params);
    let header = Header {
        dtype: T::DTYPE,
        spec: params.spec,
        meta,
        tensors: order
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| format_err(path, format!("header encode: {e}")))?;

    let mut payload = Vec::new();
    for (_, t) in &order {
        for &v in t.values() {
            v.write_le(&mut payload);
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    file.write_all(&(header_json.len() as u32).to_le_bytes()).map_err(|e| io_err(path, e))?;
    file.write_all(&header_json).map_err(|e| io_err(path, e))?;
    file.write_all(&payload).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Loads a checkpoint, converting stored scalars to `T` when the dtypes
/// differ.
pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(StackedParams<T>, CheckpointMeta)> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;

    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(format_err(path, "not a checkpoint file (bad magic)"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(format_err(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| format_err(path, format!("header decode: {e}")))?;
    header.spec.validate()?;

    // Re-derive the canonical tensor order and check the header agrees.
    let template: StackedParams<T> = init_params(&header.spec, 0)?;
    let expected: Vec<(String, Vec<usize>, usize)> = tensor_order(&template)
        .into_iter()
        .map(|(name, t)| (name, t.shape().to_vec(), t.len()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(format_err(
            path,
            format!("expected {} tensors, header lists {}", expected.len(), header.tensors.len()),
        ));
    }
    for ((name, shape, _), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(format_err(
                path,
                format!(
                    "tensor mismatch: expected {name} {shape:?}, header has {} {:?}",
                    entry.name, entry.shape
                ),
            ));
        }
    }

    let elem = match header.dtype {
        Dtype::F32 => f32::BYTES,
        Dtype::F64 => f64::BYTES,
    };
    let total: usize = expected.iter().map(|(_, _, n)| n).sum();
    let payload = &body[header_len..];
    if payload.len() != total * elem {
        return Err(format_err(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), total * elem),
        ));
    }

    let mut params = template;
    let mut offset = 0usize;
    for stage in &mut params.stages {
        for layer in &mut stage.layers {
            for t in [&mut layer.weight, &mut layer.bias] {
                let n = t.len();
                let chunk = &payload[offset * elem..(offset + n) * elem];
                for (dst, src) in t.values_mut().iter_mut().zip(chunk.chunks_exact(elem)) {
                    *dst = match header.dtype {
                        Dtype::F32 => T::from_f64(f32::read_le(src).as_f64()),
                        Dtype::F64 => T::from_f64(f64::read_le(src)),
                    };
                }
                offset += n;
            }
        }
    }
    Ok((params, header.meta))
}
