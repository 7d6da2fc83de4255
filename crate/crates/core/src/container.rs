//! Binary named-tensor container: an 8-byte little-endian header length,
//! a JSON header mapping tensor names to dtype/shape/byte-range, then the
//! raw little-endian buffers. Layout-compatible with the common
//! safetensors format; dtypes F32 and F64 are supported.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// A parsed container: tensors as f64 data (F32 is widened on read) plus the
/// optional string metadata block.
#[derive(Debug, Default)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Fetches a 2-D tensor as a matrix, validating rank.
    pub fn tensor_matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.tensor(name)?;
        match t.shape.as_slice() {
            [rows, cols] => Matrix::new(*rows, *cols, t.data.clone()),
            other => Err(Error::TensorShape {
                tensor: name.to_string(),
                expected: vec![0, 0],
                got: other.to_vec(),
            }),
        }
    }

    /// Fetches a 1-D tensor as a vector.
    pub fn tensor_vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.tensor(name)?;
        match t.shape.as_slice() {
            [_n] => Ok(t.data.clone()),
            other => Err(Error::TensorShape {
                tensor: name.to_string(),
                expected: vec![0],
                got: other.to_vec(),
            }),
        }
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::MalformedContainer("file shorter than the 8-byte header".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::MalformedContainer("header truncated".into()))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::MalformedContainer(format!("header is not valid JSON: {e}")))?;

    let mut out = Container::default();
    for (name, value) in header {
        if name == METADATA_KEY {
            let meta: BTreeMap<String, String> = serde_json::from_value(value)
                .map_err(|e| Error::MalformedContainer(format!("bad metadata block: {e}")))?;
            out.metadata = meta;
            continue;
        }
        let th: TensorHeader = serde_json::from_value(value)
            .map_err(|e| Error::MalformedContainer(format!("bad entry for '{name}': {e}")))?;
        let [start, end] = th.data_offsets;
        if end < start || end > payload.len() {
            return Err(Error::MalformedContainer(format!(
                "tensor '{name}' byte range {start}..{end} outside payload of {} bytes",
                payload.len()
            )));
        }
        let bytes = &payload[start..end];
        let count: usize = th.shape.iter().product();
        let data = match th.dtype.as_str() {
            "F64" => {
                if bytes.len() != count * 8 {
                    return Err(Error::MalformedContainer(format!(
                        "tensor '{name}': {} bytes for {} f64 values",
                        bytes.len(),
                        count
                    )));
                }
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            "F32" => {
                if bytes.len() != count * 4 {
                    return Err(Error::MalformedContainer(format!(
                        "tensor '{name}': {} bytes for {} f32 values",
                        bytes.len(),
                        count
                    )));
                }
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            other => {
                return Err(Error::UnsupportedDtype {
                    tensor: name,
                    dtype: other.to_string(),
                })
            }
        };
        out.tensors.insert(
            name,
            Tensor {
                dtype: th.dtype,
                shape: th.shape,
                data,
            },
        );
    }
    Ok(out)
}

/// Writes matrices as F64 tensors. Key order in the header is sorted, and
/// buffers follow in the same order, so the output is byte-deterministic.
pub fn write_container(
    path: &Path,
    tensors: &[(&str, &Matrix)],
    metadata: &[(&str, &str)],
) -> Result<()> {
    let entries: Vec<(String, Vec<usize>, Vec<f64>)> = tensors
        .iter()
        .map(|(name, m)| {
            (
                name.to_string(),
                vec![m.rows(), m.cols()],
                m.data().to_vec(),
            )
        })
        .collect();
    write_entries(path, entries, metadata)
}

/// Writer for mixed-rank tensors (vectors and matrices).
pub fn write_entries(
    path: &Path,
    mut entries: Vec<(String, Vec<usize>, Vec<f64>)>,
    metadata: &[(&str, &str)],
) -> Result<()> {
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let mut header: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    let mut offset = 0usize;
    for (name, shape, data) in &entries {
        let nbytes = data.len() * 8;
        header.insert(
            name.clone(),
            serde_json::to_value(TensorHeader {
                dtype: "F64".into(),
                shape: shape.clone(),
                data_offsets: [offset, offset + nbytes],
            })?,
        );
        offset += nbytes;
    }
    if !metadata.is_empty() {
        let meta: BTreeMap<&str, &str> = metadata.iter().copied().collect();
        header.insert(METADATA_KEY.into(), serde_json::to_value(meta)?);
    }

    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, _, data) in &entries {
        for v in data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}
