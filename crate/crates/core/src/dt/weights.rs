//! Weight container.
//!
//! ```text
//! DTW 1\n
//! {"format_version":1,"dtype":"f32le","config":{..},"normalization":{..},"tensors":[..]}\n
//! <payload>
//! ```
//!
//! The second line is a single JSON object. Each tensor entry gives its
//! name, shape, byte offset into the payload and byte length. The payload
//! holds the tensors as little-endian `f32`, row-major, in directory order.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DtConfig, DtModel, Normalization};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &str = "DTW 1";
const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub format_version: u32,
    pub dtype: String,
    pub config: DtConfig,
    pub normalization: Normalization,
    pub tensors: Vec<TensorEntry>,
}

fn encode<T: Scalar>(model: &DtModel<T>) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.named_tensors() {
        let offset = payload.len() as u64;
        for &v in t.iter() {
            payload.extend_from_slice(&v.into_f32().to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let header = WeightHeader {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.into(),
        config: model.config().clone(),
        normalization: model.normalization().clone(),
        tensors: entries,
    };
    let mut out = format!("{MAGIC}\n").into_bytes();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    out.extend(payload);
    out
}

/// Writes `model` to `path`. `f64` models are narrowed to `f32`.
pub fn save_weights<T: Scalar>(model: &DtModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}

pub(super) fn decode<T: Scalar>(bytes: &[u8]) -> Result<DtModel<T>> {
    let bad = |m: String| Error::Weights(m);
    let (magic, rest) = split_line(bytes).ok_or_else(|| bad("missing header".into()))?;
    if magic != MAGIC.as_bytes() {
        return Err(bad("not a weight file (bad magic line)".into()));
    }
    let (header_line, payload) = split_line(rest).ok_or_else(|| bad("missing header".into()))?;
    let header: WeightHeader =
        serde_json::from_slice(header_line).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if header.dtype != DTYPE {
        return Err(bad(format!("unsupported dtype `{}`", header.dtype)));
    }
    header
        .config
        .validate()
        .map_err(|e| bad(format!("header config: {e}")))?;

    let mut model = DtModel::<T>::zeros(header.config.clone())?;

    let mut directory: HashMap<&str, &TensorEntry> = HashMap::new();
    let mut cursor = 0u64;
    for entry in &header.tensors {
        if entry.offset != cursor {
            return Err(bad(format!(
                "tensor `{}` is not packed in directory order",
                entry.name
            )));
        }
        cursor = cursor.saturating_add(entry.length);
        if directory.insert(entry.name.as_str(), entry).is_some() {
            return Err(bad(format!("tensor `{}` listed twice", entry.name)));
        }
    }
    let mut used = 0u64;
    for (name, mut tensor) in model.named_tensors_mut() {
        let entry = directory
            .remove(name.as_str())
            .ok_or_else(|| bad(format!("tensor `{name}` missing")))?;
        if entry.shape != tensor.shape() {
            return Err(bad(format!(
                "tensor `{name}` has shape {:?}, config requires {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        if entry.length != 4 * tensor.len() as u64 {
            return Err(bad(format!(
                "tensor `{name}` has wrong byte length {}",
                entry.length
            )));
        }
        let end = entry.offset.checked_add(entry.length);
        let Some(data) = end.and_then(|end| payload.get(entry.offset as usize..end as usize))
        else {
            return Err(bad(format!(
                "tensor `{name}` extends past the end of the payload"
            )));
        };
        for (v, chunk) in tensor.iter_mut().zip(data.chunks_exact(4)) {
            *v = T::cast_f32(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
        used += entry.length;
    }
    if let Some(name) = directory.keys().next() {
        return Err(bad(format!("unexpected tensor `{name}`")));
    }
    if used != payload.len() as u64 {
        return Err(bad(format!(
            "payload has {} bytes, tensors cover {used}",
            payload.len()
        )));
    }
    model.set_normalization(header.normalization)?;
    Ok(model)
}

/// Reads a weight file; on any error nothing is returned.
pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<DtModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Weights(m) => Error::Weights(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl<T: Scalar> DtModel<T> {
    /// Serialized weight file contents.
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }
}
