use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use super::dtype::{f64_to_bf16, f64_to_f16, DType};
use super::{numel, Result, TensorIoError, TensorRecord, METADATA_KEY};

/// One tensor to be written.
#[derive(Debug, Clone)]
pub enum WriteEntry {
    /// Float values re-encoded to `dtype`.
    Float { record: TensorRecord, dtype: DType },
    /// Payload copied verbatim.
    Raw {
        name: String,
        dtype: DType,
        shape: Vec<usize>,
        bytes: Vec<u8>,
    },
}

impl WriteEntry {
    pub fn float(record: TensorRecord, dtype: DType) -> Self {
        WriteEntry::Float { record, dtype }
    }

    fn plan(&self) -> PlannedTensor {
        match self {
            WriteEntry::Float { record, dtype } => PlannedTensor {
                name: record.name.clone(),
                dtype: dtype.clone(),
                shape: record.shape.clone(),
            },
            WriteEntry::Raw {
                name, dtype, shape, ..
            } => PlannedTensor {
                name: name.clone(),
                dtype: dtype.clone(),
                shape: shape.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct WriteOptions {
    /// Refuse NaN/inf values instead of writing them.
    pub forbid_nonfinite: bool,
    pub metadata: Option<BTreeMap<String, String>>,
}

/// Header entry of a tensor whose payload is written later.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

/// Streaming writer: the header is emitted up front from the planned
/// layout, then payloads are appended one tensor at a time in plan order.
pub struct ModelWriter<W: Write> {
    sink: W,
    plan: Vec<(PlannedTensor, usize)>,
    next: usize,
    opts: WriteOptions,
}

impl<W: Write> ModelWriter<W> {
    pub fn new(mut sink: W, plan: Vec<PlannedTensor>, opts: WriteOptions) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut header = Map::new();
        if let Some(meta) = &opts.metadata {
            header.insert(METADATA_KEY.to_string(), json!(meta));
        }
        let mut offset = 0usize;
        let mut sized = Vec::with_capacity(plan.len());
        for t in plan {
            if t.name == METADATA_KEY || !seen.insert(t.name.clone()) {
                return Err(invalid(&t.name, "duplicate or reserved tensor name"));
            }
            let width = t
                .dtype
                .byte_width()
                .ok_or_else(|| invalid(&t.name, format!("unknown width for dtype {}", t.dtype)))?;
            let len = numel(&t.shape)
                .and_then(|n| n.checked_mul(width))
                .ok_or_else(|| invalid(&t.name, "element count overflows"))?;
            header.insert(
                t.name.clone(),
                json!({
                    "dtype": t.dtype.name(),
                    "shape": t.shape,
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
            sized.push((t, len));
        }
        let mut text = serde_json::to_string(&Value::Object(header)).expect("header serializes");
        // Pad so the data buffer starts on an 8-byte boundary.
        while (8 + text.len()) % 8 != 0 {
            text.push(' ');
        }
        sink.write_all(&(text.len() as u64).to_le_bytes())
            .and_then(|_| sink.write_all(text.as_bytes()))
            .map_err(io)?;
        Ok(ModelWriter {
            sink,
            plan: sized,
            next: 0,
            opts,
        })
    }

    fn take_next(&mut self, payload_len: usize) -> Result<PlannedTensor> {
        let (planned, len) = self
            .plan
            .get(self.next)
            .cloned()
            .ok_or_else(|| invalid("<none>", "more payloads than planned tensors"))?;
        if payload_len != len {
            return Err(invalid(
                &planned.name,
                format!("payload is {payload_len} bytes, plan expects {len}"),
            ));
        }
        self.next += 1;
        Ok(planned)
    }

    /// Encodes `values` to the next planned tensor's dtype.
    pub fn write_float(&mut self, values: &[f64]) -> Result<()> {
        let planned = match self.plan.get(self.next) {
            Some((p, _)) => p.clone(),
            None => return Err(invalid("<none>", "more payloads than planned tensors")),
        };
        if self.opts.forbid_nonfinite {
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(TensorIoError::NonFiniteValue {
                    name: planned.name,
                    index,
                });
            }
        }
        let bytes = encode_values(&planned.name, values, &planned.dtype)?;
        self.take_next(bytes.len())?;
        self.sink.write_all(&bytes).map_err(io)
    }

    pub fn write_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.take_next(bytes.len())?;
        self.sink.write_all(bytes).map_err(io)
    }

    pub fn finish(mut self) -> Result<W> {
        if self.next != self.plan.len() {
            let name = self.plan[self.next].0.name.clone();
            return Err(invalid(&name, "payload never written"));
        }
        self.sink.flush().map_err(io)?;
        Ok(self.sink)
    }
}

fn encode_values(name: &str, values: &[f64], dtype: &DType) -> Result<Vec<u8>> {
    Ok(match dtype {
        DType::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        DType::F16 => values.iter().flat_map(|&v| f64_to_f16(v).to_le_bytes()).collect(),
        DType::BF16 => values.iter().flat_map(|&v| f64_to_bf16(v).to_le_bytes()).collect(),
        DType::Unsupported(d) => {
            return Err(TensorIoError::UnsupportedDType {
                name: name.to_string(),
                dtype: d.clone(),
            })
        }
    })
}

fn invalid(name: &str, reason: impl Into<String>) -> TensorIoError {
    TensorIoError::InvalidRecord {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn io(source: std::io::Error) -> TensorIoError {
    TensorIoError::Io {
        path: "<sink>".into(),
        source,
    }
}

fn write_entries<W: Write>(sink: W, entries: &[WriteEntry], opts: &WriteOptions) -> Result<W> {
    let plan = entries.iter().map(WriteEntry::plan).collect();
    let mut writer = ModelWriter::new(sink, plan, opts.clone())?;
    for entry in entries {
        match entry {
            WriteEntry::Float { record, .. } => writer.write_float(&record.values)?,
            WriteEntry::Raw { bytes, .. } => writer.write_raw(bytes)?,
        }
    }
    writer.finish()
}

/// Serializes `entries` in order to an in-memory safetensors image.
pub fn encode_model(entries: &[WriteEntry], opts: &WriteOptions) -> Result<Vec<u8>> {
    write_entries(Vec::new(), entries, opts)
}

pub fn write_model(path: impl AsRef<Path>, entries: &[WriteEntry], opts: &WriteOptions) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_entries(BufWriter::new(file), entries, opts)
        .map(|_| ())
        .map_err(|e| match e {
            TensorIoError::Io { source, .. } => TensorIoError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
}

#[cfg(test)]
mod tests {
    use super::super::ModelIndex;
    use super::*;

    #[test]
    fn f32_round_trip() {
        let rec = TensorRecord::new("w", vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = encode_model(&[WriteEntry::float(rec, DType::F32)], &Default::default()).unwrap();
        assert_eq!(bytes.len() % 8, 0);
        let index = ModelIndex::from_bytes(bytes).unwrap();
        let back = index.load_tensor("w").unwrap();
        assert_eq!(back.values, vec![1.0, 2.0]);
        assert_eq!(back.source_dtype, DType::F32);
    }

    #[test]
    fn bf16_rounds_to_nearest_even() {
        let rec = TensorRecord::new("w", vec![1], vec![1.000_000_1]).unwrap();
        let bytes = encode_model(&[WriteEntry::float(rec, DType::BF16)], &Default::default()).unwrap();
        let index = ModelIndex::from_bytes(bytes).unwrap();
        assert_eq!(index.load_tensor("w").unwrap().values, vec![1.0]);
    }

    #[test]
    fn nonfinite_policy() {
        let rec = TensorRecord::new("w", vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(rec.has_nonfinite);
        let entries = [WriteEntry::float(rec, DType::F32)];
        let strict = WriteOptions {
            forbid_nonfinite: true,
            ..Default::default()
        };
        assert!(matches!(
            encode_model(&entries, &strict),
            Err(TensorIoError::NonFiniteValue { index: 1, .. })
        ));
        let bytes = encode_model(&entries, &Default::default()).unwrap();
        let back = ModelIndex::from_bytes(bytes).unwrap().load_tensor("w").unwrap();
        assert!(back.values[1].is_nan() && back.has_nonfinite);
    }

    #[test]
    fn raw_passthrough_and_metadata() {
        let entries = [
            WriteEntry::Raw {
                name: "steps".into(),
                dtype: DType::parse("I64"),
                shape: vec![1],
                bytes: 7i64.to_le_bytes().to_vec(),
            },
            WriteEntry::float(TensorRecord::new("w", vec![1], vec![0.5]).unwrap(), DType::F16),
        ];
        let opts = WriteOptions {
            metadata: Some([("format".to_string(), "pt".to_string())].into()),
            ..Default::default()
        };
        let index = ModelIndex::from_bytes(encode_model(&entries, &opts).unwrap()).unwrap();
        assert_eq!(index.raw_bytes("steps").unwrap(), &7i64.to_le_bytes());
        assert_eq!(index.metas()[0].name, "steps");
        assert_eq!(index.metadata().unwrap()["format"], "pt");
    }

    #[test]
    fn rejects_duplicates_and_short_streams() {
        let rec = TensorRecord::new("w", vec![1], vec![0.5]).unwrap();
        let dup = [
            WriteEntry::float(rec.clone(), DType::F32),
            WriteEntry::float(rec, DType::F32),
        ];
        assert!(encode_model(&dup, &Default::default()).is_err());

        let plan = vec![PlannedTensor {
            name: "w".into(),
            dtype: DType::F32,
            shape: vec![2],
        }];
        let w = ModelWriter::new(Vec::new(), plan.clone(), Default::default()).unwrap();
        assert!(w.finish().is_err());
        let mut w = ModelWriter::new(Vec::new(), plan, Default::default()).unwrap();
        assert!(w.write_float(&[1.0]).is_err());
    }
}
