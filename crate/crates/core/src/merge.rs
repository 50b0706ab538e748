//! Merging fine-tuned checkpoints that share a base model.
//!
//! Each named tensor is a parameter group. For group `k` the task vectors
//! `ΔW_i = W'_i − W` of the `n` fine-tuned models are compared against
//! `t·σ`, where `σ` is the smallest per-model population std of the group.
//! Elements inside `[c − tσ, c + tσ]` are scaled by `1/n`, the rest are
//! kept as-is, and the processed deltas are summed onto the base.
//!
//! At every element the `n` processed deltas are summed in ascending order,
//! so the merged result does not depend on the order of the input models.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moments::{Center, Moments};
use crate::tensor_io::{
    DType, ModelIndex, ModelWriter, PlannedTensor, TensorIoError, TensorRecord, WriteEntry,
    WriteOptions,
};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("tensor `{name}` of model {model} has shape {found:?}, base has {expected:?}")]
    ShapeMismatch {
        name: String,
        model: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("model {model} lacks tensor `{name}`")]
    MissingTensor { name: String, model: usize },
    #[error("tensor `{0}` is not a float tensor")]
    NonFloatTensor(String),
    #[error("no fine-tuned models given")]
    NoModels,
    #[error("invalid merge options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

pub type Result<T, E = MergeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    OutlierAware,
    Average,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonFloatPolicy {
    CopyBase,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeOptions {
    pub t: f64,
    pub mode: MergeMode,
    pub center: Center,
    pub non_float_policy: NonFloatPolicy,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            t: 2.0,
            mode: MergeMode::OutlierAware,
            center: Center::Zero,
            non_float_policy: NonFloatPolicy::CopyBase,
        }
    }
}

impl MergeOptions {
    pub fn outlier_aware(t: f64) -> Self {
        MergeOptions {
            t,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(MergeError::InvalidOptions(format!("t must be finite and >= 0, got {}", self.t)));
        }
        Ok(())
    }
}

/// Task vectors of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDeltas {
    pub name: String,
    pub shape: Vec<usize>,
    pub base_dtype: DType,
    pub base: Vec<f64>,
    /// One delta per fine-tuned model, input order.
    pub deltas: Vec<Vec<f64>>,
    /// Population std of each delta.
    pub sigmas: Vec<f64>,
    /// Minimum of `sigmas`.
    pub sigma: f64,
}

impl GroupDeltas {
    /// `finetuned[i]` is model `i`'s version of the `base` tensor.
    pub fn new(base: TensorRecord, finetuned: &[TensorRecord]) -> Result<Self> {
        if finetuned.is_empty() {
            return Err(MergeError::NoModels);
        }
        let mut deltas = Vec::with_capacity(finetuned.len());
        for (model, ft) in finetuned.iter().enumerate() {
            if ft.shape != base.shape {
                return Err(MergeError::ShapeMismatch {
                    name: base.name.clone(),
                    model,
                    expected: base.shape.clone(),
                    found: ft.shape.clone(),
                });
            }
            deltas.push(
                ft.values
                    .par_iter()
                    .zip(&base.values)
                    .map(|(w1, w0)| w1 - w0)
                    .collect::<Vec<f64>>(),
            );
        }
        let sigmas: Vec<f64> = deltas
            .iter()
            .map(|d| Moments::of(d).map_or(0.0, |m| m.std()))
            .collect();
        let sigma = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(GroupDeltas {
            name: base.name,
            shape: base.shape,
            base_dtype: base.source_dtype,
            base: base.values,
            deltas,
            sigmas,
            sigma,
        })
    }

    pub fn n(&self) -> usize {
        self.deltas.len()
    }
}

/// A non-float tensor carried over from the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskGroup {
    Float(GroupDeltas),
    Raw(RawTensor),
}

/// Task vectors of `n` fine-tuned models over every group of a base model,
/// in base header order.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVectorSet {
    pub n: usize,
    pub groups: Vec<TaskGroup>,
}

impl TaskVectorSet {
    /// In-memory construction; `models[i]` must contain every base name.
    pub fn from_records(base: &[TensorRecord], models: &[Vec<TensorRecord>]) -> Result<Self> {
        if models.is_empty() {
            return Err(MergeError::NoModels);
        }
        let groups = base
            .iter()
            .map(|b| {
                let fts = models
                    .iter()
                    .enumerate()
                    .map(|(model, m)| {
                        m.iter()
                            .find(|r| r.name == b.name)
                            .cloned()
                            .ok_or_else(|| MergeError::MissingTensor {
                                name: b.name.clone(),
                                model,
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                GroupDeltas::new(b.clone(), &fts).map(TaskGroup::Float)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskVectorSet {
            n: models.len(),
            groups,
        })
    }

    /// Task vectors of checkpoints. Loads every group at once; the streaming
    /// path is [`merge_checkpoints`].
    pub fn from_indices(
        base: &ModelIndex,
        models: &[ModelIndex],
        policy: NonFloatPolicy,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(MergeError::NoModels);
        }
        let groups = base
            .metas()
            .iter()
            .map(|meta| load_group(base, models, &meta.name, policy))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskVectorSet {
            n: models.len(),
            groups,
        })
    }

    pub fn float_groups(&self) -> impl Iterator<Item = &GroupDeltas> {
        self.groups.iter().filter_map(|g| match g {
            TaskGroup::Float(g) => Some(g),
            TaskGroup::Raw(_) => None,
        })
    }
}

fn load_group(
    base: &ModelIndex,
    models: &[ModelIndex],
    name: &str,
    policy: NonFloatPolicy,
) -> Result<TaskGroup> {
    let meta = base.meta(name).ok_or_else(|| TensorIoError::UnknownTensor(name.into()))?;
    if !meta.dtype.is_float() {
        return match policy {
            NonFloatPolicy::Fail => Err(MergeError::NonFloatTensor(name.into())),
            NonFloatPolicy::CopyBase => Ok(TaskGroup::Raw(RawTensor {
                name: name.into(),
                dtype: meta.dtype.clone(),
                shape: meta.shape.clone(),
                bytes: base.raw_bytes(name)?.to_vec(),
            })),
        };
    }
    let base_rec = base.load_tensor(name)?;
    let fts = models
        .iter()
        .enumerate()
        .map(|(model, m)| match m.meta(name) {
            None => Err(MergeError::MissingTensor {
                name: name.into(),
                model,
            }),
            Some(mm) if mm.shape != meta.shape => Err(MergeError::ShapeMismatch {
                name: name.into(),
                model,
                expected: meta.shape.clone(),
                found: mm.shape.clone(),
            }),
            Some(_) => Ok(m.load_tensor(name)?),
        })
        .collect::<Result<Vec<_>>>()?;
    GroupDeltas::new(base_rec, &fts).map(TaskGroup::Float)
}

/// Per-group merge diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub numel: usize,
    pub sigmas: Vec<f64>,
    pub sigma: f64,
    /// `t·σ`; absent for average and sum merges.
    pub threshold: Option<f64>,
    pub outlier_counts: Vec<u64>,
    pub in_range_fractions: Vec<f64>,
}

/// Sum of `parts` in ascending order.
#[inline]
pub fn ordered_sum(parts: &mut [f64]) -> f64 {
    parts.sort_unstable_by(f64::total_cmp);
    parts.iter().sum()
}

/// Merges one group; returns merged values and diagnostics.
pub fn merge_group(g: &GroupDeltas, opts: &MergeOptions) -> Result<(Vec<f64>, GroupReport)> {
    opts.validate()?;
    let n = g.n();
    let inv_n = 1.0 / n as f64;
    let windows: Option<Vec<(f64, f64)>> = match opts.mode {
        MergeMode::OutlierAware => {
            let half = opts.t * g.sigma;
            Some(
                g.deltas
                    .iter()
                    .map(|d| {
                        let c = match opts.center {
                            Center::Zero => 0.0,
                            Center::SampleMean => Moments::of(d).map_or(0.0, |m| m.mean),
                        };
                        (c - half, c + half)
                    })
                    .collect(),
            )
        }
        _ => None,
    };

    let numel = g.base.len();
    let merged: Vec<f64> = (0..numel)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |parts, j| {
                for (i, d) in g.deltas.iter().enumerate() {
                    let x = d[j];
                    parts[i] = match &windows {
                        Some(w) => {
                            let (lo, hi) = w[i];
                            if x >= lo && x <= hi {
                                inv_n * x
                            } else {
                                x
                            }
                        }
                        None => x,
                    };
                }
                let total = ordered_sum(parts);
                match opts.mode {
                    MergeMode::Average => g.base[j] + total / n as f64,
                    MergeMode::OutlierAware | MergeMode::Sum => g.base[j] + total,
                }
            },
        )
        .collect();

    let outlier_counts: Vec<u64> = match &windows {
        Some(w) => g
            .deltas
            .iter()
            .zip(w)
            .map(|(d, &(lo, hi))| d.par_iter().filter(|&&x| !(x >= lo && x <= hi)).count() as u64)
            .collect(),
        None => vec![0; n],
    };
    let in_range_fractions = outlier_counts
        .iter()
        .map(|&c| if numel == 0 { 1.0 } else { 1.0 - c as f64 / numel as f64 })
        .collect();
    Ok((
        merged,
        GroupReport {
            name: g.name.clone(),
            numel,
            sigmas: g.sigmas.clone(),
            sigma: g.sigma,
            threshold: windows.as_ref().map(|_| opts.t * g.sigma),
            outlier_counts,
            in_range_fractions,
        },
    ))
}

/// Output of an in-memory merge: tensors ready for writing plus diagnostics.
#[derive(Debug, Clone)]
pub struct MergedModel {
    pub entries: Vec<WriteEntry>,
    pub report: Vec<GroupReport>,
}

impl MergedModel {
    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.entries.iter().find_map(|e| match e {
            WriteEntry::Float { record, .. } if record.name == name => Some(record),
            _ => None,
        })
    }
}

fn merge_set(tv: &TaskVectorSet, opts: &MergeOptions) -> Result<MergedModel> {
    opts.validate()?;
    let mut entries = Vec::with_capacity(tv.groups.len());
    let mut report = Vec::new();
    for g in &tv.groups {
        match g {
            TaskGroup::Float(g) => {
                let (values, r) = merge_group(g, opts)?;
                let record =
                    TensorRecord::with_dtype(g.name.clone(), g.shape.clone(), values, g.base_dtype.clone())?;
                entries.push(WriteEntry::float(record, g.base_dtype.clone()));
                report.push(r);
            }
            TaskGroup::Raw(raw) => {
                if opts.non_float_policy == NonFloatPolicy::Fail {
                    return Err(MergeError::NonFloatTensor(raw.name.clone()));
                }
                entries.push(WriteEntry::Raw {
                    name: raw.name.clone(),
                    dtype: raw.dtype.clone(),
                    shape: raw.shape.clone(),
                    bytes: raw.bytes.clone(),
                });
            }
        }
    }
    Ok(MergedModel { entries, report })
}

/// Outlier-aware merge with threshold multiplier `opts.t`.
pub fn merge_outlier_aware(tv: &TaskVectorSet, opts: &MergeOptions) -> Result<MergedModel> {
    merge_set(
        tv,
        &MergeOptions {
            mode: MergeMode::OutlierAware,
            ..*opts
        },
    )
}

/// `W + (1/n) Σ ΔW_i`.
pub fn merge_average(tv: &TaskVectorSet) -> Result<MergedModel> {
    merge_set(
        tv,
        &MergeOptions {
            mode: MergeMode::Average,
            ..Default::default()
        },
    )
}

/// `W + Σ ΔW_i`.
pub fn merge_sum(tv: &TaskVectorSet) -> Result<MergedModel> {
    merge_set(
        tv,
        &MergeOptions {
            mode: MergeMode::Sum,
            ..Default::default()
        },
    )
}

/// Dispatches on `opts.mode`.
pub fn merge(tv: &TaskVectorSet, opts: &MergeOptions) -> Result<MergedModel> {
    merge_set(tv, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputDType {
    /// Each tensor keeps the base model's dtype.
    #[default]
    Base,
    F32,
}

/// Streaming checkpoint merge: one group (base plus `n` fine-tuned tensors)
/// is resident at a time, written to `sink` in base header order.
pub fn merge_checkpoints<W: Write>(
    base: &ModelIndex,
    models: &[ModelIndex],
    opts: &MergeOptions,
    output: OutputDType,
    sink: W,
) -> Result<(W, Vec<GroupReport>)> {
    opts.validate()?;
    if models.is_empty() {
        return Err(MergeError::NoModels);
    }
    let mut plan = Vec::with_capacity(base.len());
    for meta in base.metas() {
        if !meta.dtype.is_float() && opts.non_float_policy == NonFloatPolicy::Fail {
            return Err(MergeError::NonFloatTensor(meta.name.clone()));
        }
        let dtype = match (&meta.dtype, output) {
            (d, _) if !d.is_float() => d.clone(),
            (_, OutputDType::F32) => DType::F32,
            (d, OutputDType::Base) => d.clone(),
        };
        plan.push(PlannedTensor {
            name: meta.name.clone(),
            dtype,
            shape: meta.shape.clone(),
        });
    }
    let write_opts = WriteOptions {
        metadata: base.metadata().cloned(),
        ..Default::default()
    };
    let mut writer = ModelWriter::new(sink, plan, write_opts)?;
    let mut report = Vec::new();
    for meta in base.metas() {
        match load_group(base, models, &meta.name, opts.non_float_policy)? {
            TaskGroup::Float(g) => {
                let (values, r) = merge_group(&g, opts)?;
                writer.write_float(&values)?;
                report.push(r);
            }
            TaskGroup::Raw(raw) => writer.write_raw(&raw.bytes)?,
        }
    }
    Ok((writer.finish()?, report))
}
