use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use regex::Regex;
use serde::Serialize;
use serde_json::Value;

use super::dtype::{bf16_to_f64, f16_to_f64, DType};
use super::{numel, Result, TensorIoError, TensorRecord, METADATA_KEY};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// `(start, end)` relative to the data buffer.
    pub byte_range: (usize, usize),
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        numel(&self.shape).unwrap_or(0)
    }
}

enum Buffer {
    Mapped(Mmap),
    Owned(Vec<u8>),
}

impl Buffer {
    fn bytes(&self) -> &[u8] {
        match self {
            Buffer::Mapped(m) => m,
            Buffer::Owned(v) => v,
        }
    }
}

/// Parsed header plus the file bytes it indexes. Immutable once built.
pub struct ModelIndex {
    metas: Vec<TensorMeta>,
    positions: HashMap<String, usize>,
    metadata: Option<BTreeMap<String, String>>,
    buffer: Buffer,
    data_start: usize,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for ModelIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelIndex")
            .field("path", &self.path)
            .field("tensors", &self.metas.len())
            .field("metadata", &self.metadata)
            .finish()
    }
}

/// One item yielded by [`ModelIndex::iter_tensors`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorEntry {
    Tensor(TensorRecord),
    /// A tensor whose dtype cannot be decoded to floats.
    Skipped { name: String, dtype: String },
}

/// Memory-maps `path` and parses its header.
pub fn read_header(path: impl AsRef<Path>) -> Result<ModelIndex> {
    let path = path.as_ref();
    let io_err = |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let len = file.metadata().map_err(io_err)?.len();
    let buffer = if len == 0 {
        Buffer::Owned(Vec::new())
    } else {
        // SAFETY: the mapping is read-only; concurrent truncation of the file
        // by another process is outside this tool's contract.
        Buffer::Mapped(unsafe { Mmap::map(&file) }.map_err(io_err)?)
    };
    let mut index = ModelIndex::parse(buffer)?;
    index.path = Some(path.to_path_buf());
    Ok(index)
}

impl ModelIndex {
    /// Parses an in-memory checkpoint.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        Self::parse(Buffer::Owned(bytes))
    }

    fn parse(buffer: Buffer) -> Result<Self> {
        let bytes = buffer.bytes();
        if bytes.len() < 8 {
            return Err(TensorIoError::malformed(
                None,
                format!("file is {} bytes, shorter than the 8-byte length prefix", bytes.len()),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(TensorIoError::malformed(
                None,
                format!("header length {header_len} exceeds the {available} bytes after the prefix"),
            ));
        }
        let data_start = 8 + header_len as usize;
        let header = std::str::from_utf8(&bytes[8..data_start])
            .map_err(|e| TensorIoError::malformed(None, format!("header is not UTF-8: {e}")))?;
        let json: Value = serde_json::from_str(header)
            .map_err(|e| TensorIoError::malformed(None, format!("invalid JSON: {e}")))?;
        let Value::Object(entries) = json else {
            return Err(TensorIoError::malformed(None, "header is not a JSON object"));
        };
        let data_len = bytes.len() - data_start;

        let mut metas = Vec::with_capacity(entries.len());
        let mut metadata = None;
        for (name, value) in entries {
            if name == METADATA_KEY {
                metadata = Some(parse_metadata(value)?);
                continue;
            }
            let meta = parse_meta(name, value)?;
            if meta.byte_range.1 > data_len {
                return Err(TensorIoError::malformed(
                    Some(&meta.name),
                    format!(
                        "data_offsets end {} beyond the {data_len}-byte data buffer",
                        meta.byte_range.1
                    ),
                ));
            }
            metas.push(meta);
        }
        check_overlaps(&metas)?;
        let positions = metas
            .iter()
            .enumerate()
            .map(|(i, m)| (m.name.clone(), i))
            .collect();
        Ok(ModelIndex {
            metas,
            positions,
            metadata,
            buffer,
            data_start,
            path: None,
        })
    }

    /// Tensor metadata in header order.
    pub fn metas(&self) -> &[TensorMeta] {
        &self.metas
    }

    pub fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.positions.get(name).map(|&i| &self.metas[i])
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    /// Raw payload bytes of a tensor, whatever its dtype.
    pub fn raw_bytes(&self, name: &str) -> Result<&[u8]> {
        let meta = self
            .meta(name)
            .ok_or_else(|| TensorIoError::UnknownTensor(name.to_string()))?;
        let (start, end) = meta.byte_range;
        Ok(&self.buffer.bytes()[self.data_start + start..self.data_start + end])
    }

    /// Decodes a float tensor to `f64`.
    pub fn load_tensor(&self, name: &str) -> Result<TensorRecord> {
        let meta = self
            .meta(name)
            .ok_or_else(|| TensorIoError::UnknownTensor(name.to_string()))?;
        let raw = self.raw_bytes(name)?;
        let values: Vec<f64> = match &meta.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F16 => raw
                .chunks_exact(2)
                .map(|c| f16_to_f64(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            DType::BF16 => raw
                .chunks_exact(2)
                .map(|c| bf16_to_f64(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            DType::Unsupported(dtype) => {
                return Err(TensorIoError::UnsupportedDType {
                    name: name.to_string(),
                    dtype: dtype.clone(),
                })
            }
        };
        let has_nonfinite = values.iter().any(|v| !v.is_finite());
        Ok(TensorRecord {
            name: meta.name.clone(),
            shape: meta.shape.clone(),
            values,
            source_dtype: meta.dtype.clone(),
            has_nonfinite,
        })
    }

    /// Tensors whose name matches `pattern` (all when `None`), in header
    /// order. Non-float tensors come back as [`TensorEntry::Skipped`].
    pub fn iter_tensors<'a>(
        &'a self,
        pattern: Option<&'a Regex>,
    ) -> impl Iterator<Item = Result<TensorEntry>> + 'a {
        self.metas
            .iter()
            .filter(move |m| pattern.map_or(true, |re| re.is_match(&m.name)))
            .map(move |m| {
                if m.dtype.is_float() {
                    self.load_tensor(&m.name).map(TensorEntry::Tensor)
                } else {
                    Ok(TensorEntry::Skipped {
                        name: m.name.clone(),
                        dtype: m.dtype.name().to_string(),
                    })
                }
            })
    }
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = value else {
        return Err(TensorIoError::malformed(None, "__metadata__ is not an object"));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            _ => Err(TensorIoError::malformed(
                None,
                format!("__metadata__ value for `{k}` is not a string"),
            )),
        })
        .collect()
}

fn parse_meta(name: String, value: Value) -> Result<TensorMeta> {
    let bad = |reason: &str| TensorIoError::malformed(Some(&name), reason);
    let Value::Object(obj) = value else {
        return Err(bad("entry is not an object"));
    };
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .map(DType::parse)
        .ok_or_else(|| bad("missing string field `dtype`"))?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing array field `shape`"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape entries must be non-negative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing array field `data_offsets`"))?;
    let (start, end) = match offsets.as_slice() {
        [s, e] => (
            s.as_u64().ok_or_else(|| bad("data_offsets must be integers"))? as usize,
            e.as_u64().ok_or_else(|| bad("data_offsets must be integers"))? as usize,
        ),
        _ => return Err(bad("data_offsets must hold exactly two entries")),
    };
    if end < start {
        return Err(bad("data_offsets end precedes start"));
    }
    if let Some(width) = dtype.byte_width() {
        let expected = numel(&shape)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| bad("element count overflows"))?;
        if end - start != expected {
            return Err(TensorIoError::malformed(
                Some(&name),
                format!(
                    "data_offsets span {} bytes but shape {shape:?} of {dtype} needs {expected}",
                    end - start
                ),
            ));
        }
    }
    Ok(TensorMeta {
        name,
        dtype,
        shape,
        byte_range: (start, end),
    })
}

fn check_overlaps(metas: &[TensorMeta]) -> Result<()> {
    let mut ranges: Vec<&TensorMeta> = metas
        .iter()
        .filter(|m| m.byte_range.0 < m.byte_range.1)
        .collect();
    ranges.sort_by_key(|m| m.byte_range);
    for pair in ranges.windows(2) {
        if pair[1].byte_range.0 < pair[0].byte_range.1 {
            return Err(TensorIoError::malformed(
                Some(&pair[1].name),
                format!("data_offsets overlap tensor `{}`", pair[0].name),
            ));
        }
    }
    Ok(())
}
