//! The single-file tensor container.
//!
//! ```text
//! [u64 LE header length N][N bytes of JSON index][raw little-endian tensor data]
//! ```
//!
//! The index maps each tensor name to `{dtype, shape, data_offsets: [begin, end]}`
//! with offsets relative to the start of the data region. An optional
//! `__metadata__` entry holds string key/value pairs and is ignored.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

pub type TensorMap = BTreeMap<String, Tensor>;

const METADATA_KEY: &str = "__metadata__";
/// Headers larger than this are rejected outright.
const MAX_HEADER_LEN: u64 = 100 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("truncated header: file has {available} bytes, header needs {needed}")]
    TruncatedHeader { needed: u64, available: u64 },
    #[error("header length {0} exceeds the {MAX_HEADER_LEN}-byte limit")]
    HeaderTooLarge(u64),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor {name:?}: unsupported dtype {dtype:?}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor {name:?}: offsets [{begin}, {end}) out of bounds for a {data_len}-byte data region")]
    OutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        data_len: u64,
    },
    #[error("tensor {name:?}: shape {shape:?} needs {expected} bytes but offsets span {actual}")]
    SizeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        actual: u64,
    },
    #[error("tensor {name:?}: region [{begin}, {end}) overlaps tensor {other:?}")]
    Overlap {
        name: String,
        other: String,
        begin: u64,
        end: u64,
    },
    #[error("tensor {name:?}: gap before offset {begin} (previous region ends at {previous_end})")]
    Gap {
        name: String,
        begin: u64,
        previous_end: u64,
    },
    #[error("data region has {0} trailing bytes not covered by any tensor")]
    TrailingBytes(u64),
    #[error("tensor {name:?}: invalid shape {shape:?}")]
    InvalidShape { name: String, shape: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    fn parse(name: &str, s: &str) -> Result<Self, CheckpointError> {
        match s {
            "F32" => Ok(Self::F32),
            "F16" => Ok(Self::F16),
            "BF16" => Ok(Self::BF16),
            other => Err(CheckpointError::UnsupportedDtype {
                name: name.to_string(),
                dtype: other.to_string(),
            }),
        }
    }

    pub fn size(self) -> u64 {
        match self {
            Self::F32 => 4,
            Self::F16 | Self::BF16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    /// Dtype as stored in the file. Loaded tensors are always `f32`.
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub begin: u64,
    pub end: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckpointIndex {
    pub entries: BTreeMap<String, IndexEntry>,
}

impl CheckpointIndex {
    pub fn parameter_count(&self) -> usize {
        self.entries
            .values()
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Parse a whole checkpoint held in memory.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(CheckpointIndex, TensorMap), CheckpointError> {
    let available = bytes.len() as u64;
    if available < 8 {
        return Err(CheckpointError::TruncatedHeader {
            needed: 8,
            available,
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_LEN {
        return Err(CheckpointError::HeaderTooLarge(header_len));
    }
    if 8 + header_len > available {
        return Err(CheckpointError::TruncatedHeader {
            needed: 8 + header_len,
            available,
        });
    }
    let header = &bytes[8..8 + header_len as usize];
    let data = &bytes[8 + header_len as usize..];
    let index = parse_index(header, data.len() as u64)?;

    let mut tensors = TensorMap::new();
    for (name, entry) in &index.entries {
        let raw = &data[entry.begin as usize..entry.end as usize];
        let values = decode(entry.dtype, raw);
        let tensor = Tensor::new(entry.shape.clone(), values).map_err(|_| {
            CheckpointError::InvalidShape {
                name: name.clone(),
                shape: entry.shape.clone(),
            }
        })?;
        tensors.insert(name.clone(), tensor);
    }
    Ok((index, tensors))
}

pub fn read_checkpoint_file(
    path: impl AsRef<Path>,
) -> Result<(CheckpointIndex, TensorMap), CheckpointError> {
    let bytes = std::fs::read(path.as_ref()).map_err(|source| CheckpointError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    read_checkpoint(&bytes)
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String, CheckpointError> {
    let mut file = std::fs::File::open(path.as_ref()).map_err(|source| CheckpointError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|source| CheckpointError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    Ok(hex(&hasher.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_index(header: &[u8], data_len: u64) -> Result<CheckpointIndex, CheckpointError> {
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(header)
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let mut entries = BTreeMap::new();
    for (name, value) in raw {
        if name == METADATA_KEY {
            continue;
        }
        let entry: RawEntry = serde_json::from_value(value)
            .map_err(|e| CheckpointError::MalformedHeader(format!("tensor {name:?}: {e}")))?;
        let dtype = Dtype::parse(&name, &entry.dtype)?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > data_len {
            return Err(CheckpointError::OutOfBounds {
                name,
                begin,
                end,
                data_len,
            });
        }
        let elements: u64 = entry.shape.iter().map(|&d| d as u64).product();
        let expected = elements * dtype.size();
        if expected != end - begin {
            return Err(CheckpointError::SizeMismatch {
                name,
                shape: entry.shape,
                expected,
                actual: end - begin,
            });
        }
        entries.insert(
            name,
            IndexEntry {
                dtype,
                shape: entry.shape,
                begin,
                end,
            },
        );
    }

    let mut spans: Vec<(&String, &IndexEntry)> = entries.iter().collect();
    spans.sort_by_key(|(name, e)| (e.begin, e.end, name.as_str()));
    let mut previous: Option<(&String, u64)> = None;
    for (name, e) in &spans {
        let previous_end = previous.map_or(0, |(_, end)| end);
        if e.begin < previous_end {
            return Err(CheckpointError::Overlap {
                name: (*name).clone(),
                other: previous.map(|(n, _)| n.clone()).unwrap_or_default(),
                begin: e.begin,
                end: e.end,
            });
        }
        if e.begin > previous_end {
            return Err(CheckpointError::Gap {
                name: (*name).clone(),
                begin: e.begin,
                previous_end,
            });
        }
        previous = Some((name, e.end));
    }
    let covered = previous.map_or(0, |(_, end)| end);
    if covered != data_len {
        return Err(CheckpointError::TrailingBytes(data_len - covered));
    }
    Ok(CheckpointIndex { entries })
}

fn decode(dtype: Dtype, raw: &[u8]) -> Vec<f32> {
    match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

/// Write tensors as an `F32` container, in name order.
///
/// The header is space-padded to a multiple of 8 bytes.
pub fn write_checkpoint<'a, W: Write>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    mut out: W,
) -> std::io::Result<()> {
    let mut ordered: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    ordered.sort_by_key(|(name, _)| *name);

    let mut header = serde_json::Map::new();
    let mut offset = 0u64;
    for (name, t) in &ordered {
        let len = t.len() as u64 * 4;
        header.insert(
            (*name).to_string(),
            serde_json::json!({
                "dtype": "F32",
                "shape": t.shape(),
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    let mut header = serde_json::to_vec(&header)?;
    while header.len() % 8 != 0 {
        header.push(b' ');
    }
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut buf = Vec::with_capacity(1 << 16);
    for (_, t) in ordered {
        for chunk in t.data().chunks(1 << 14) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
    }
    out.flush()
}
