//! Safetensors checkpoint I/O.
//!
//! Layout on disk:
//!
//! ```text
//! [u64 LE header length N][N bytes UTF-8 JSON header][data buffer]
//! ```
//!
//! Header keys are tensor names mapping to `{"dtype", "shape", "data_offsets"}`;
//! offsets are relative to the start of the data buffer. The optional
//! `__metadata__` key holds a string-to-string map.
//!
//! Float payloads are decoded to `f64` for analysis. Tensors with other
//! dtypes stay addressable as raw bytes so they can be passed through.

mod dtype;
mod reader;
mod writer;

pub use dtype::{bf16_to_f64, f16_to_f64, f64_to_bf16, f64_to_f16, DType};
pub use reader::{read_header, ModelIndex, TensorEntry, TensorMeta};
pub use writer::{encode_model, write_model, ModelWriter, PlannedTensor, WriteEntry, WriteOptions};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header{}: {reason}", .tensor.as_ref().map(|t| format!(" (tensor `{t}`)")).unwrap_or_default())]
    MalformedHeader {
        tensor: Option<String>,
        reason: String,
    },
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("tensor `{name}` has unsupported dtype {dtype}")]
    UnsupportedDType { name: String, dtype: String },
    #[error("tensor `{name}` holds a non-finite value at element {index}")]
    NonFiniteValue { name: String, index: usize },
    #[error("tensor `{name}`: {reason}")]
    InvalidRecord { name: String, reason: String },
}

impl TensorIoError {
    pub(crate) fn malformed(tensor: Option<&str>, reason: impl Into<String>) -> Self {
        TensorIoError::MalformedHeader {
            tensor: tensor.map(str::to_string),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = TensorIoError> = std::result::Result<T, E>;

/// A named tensor decoded to row-major `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub source_dtype: DType,
    /// Set when any value is NaN or infinite.
    pub has_nonfinite: bool,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::with_dtype(name, shape, values, DType::F64)
    }

    pub fn with_dtype(
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<f64>,
        source_dtype: DType,
    ) -> Result<Self> {
        let name = name.into();
        let numel = numel(&shape).ok_or_else(|| TensorIoError::InvalidRecord {
            name: name.clone(),
            reason: "element count overflows".into(),
        })?;
        if numel != values.len() {
            return Err(TensorIoError::InvalidRecord {
                name,
                reason: format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            });
        }
        let has_nonfinite = values.iter().any(|v| !v.is_finite());
        Ok(TensorRecord {
            name,
            shape,
            values,
            source_dtype,
            has_nonfinite,
        })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

pub(crate) fn numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}
