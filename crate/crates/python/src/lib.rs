//! Python bindings. Structured results come back as plain dicts and lists.

use std::collections::BTreeMap;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::Serialize;

use weightscope::merge::{self as wmerge, MergeMode, MergeOptions, OutputDType, TaskVectorSet};
use weightscope::moments::{self, Center, FilterSpec};
use weightscope::noise_adapt::{self, NoiseDelta, ToyTaskSpec};
use weightscope::shape_classify::{self, ClassifierThresholds, ShapeFeatures, SweepPoint};
use weightscope::synth::{self, SweepOptions, SynthSpec};
use weightscope::tensor_io::{
    self, DType, ModelIndex, TensorEntry, TensorIoError, TensorRecord, WriteEntry, WriteOptions,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: TensorIoError) -> PyErr {
    match e {
        TensorIoError::Io { .. } => PyIOError::new_err(e.to_string()),
        TensorIoError::UnknownTensor(_) => PyKeyError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn parse_center(center: &str) -> PyResult<Center> {
    match center {
        "mean" | "sample_mean" => Ok(Center::SampleMean),
        "zero" => Ok(Center::Zero),
        other => Err(value_err(format!("center must be 'mean' or 'zero', got {other:?}"))),
    }
}

fn filter_spec(sigma_k: Option<f64>, min_magnitude: Option<f64>, center: &str) -> PyResult<Option<FilterSpec>> {
    if sigma_k.is_none() && min_magnitude.is_none() {
        return Ok(None);
    }
    Ok(Some(FilterSpec {
        sigma_k,
        magnitude_min: min_magnitude,
        center: parse_center(center)?,
    }))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(value_err("ragged matrix"));
    }
    Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect()).map_err(value_err)
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Summary statistics; `sigma_k=None` disables the σ window.
#[pyfunction]
#[pyo3(signature = (values, sigma_k=Some(3.0), min_magnitude=None, center="mean"))]
fn summarize(
    py: Python<'_>,
    values: Vec<f64>,
    sigma_k: Option<f64>,
    min_magnitude: Option<f64>,
    center: &str,
) -> PyResult<Py<PyAny>> {
    let filter = filter_spec(sigma_k, min_magnitude, center)?;
    let s = py.detach(|| moments::summarize(&values, filter.as_ref())).map_err(value_err)?;
    to_py(py, &s)
}

#[pyfunction]
#[pyo3(signature = (values, bins=200, range=None))]
fn histogram(py: Python<'_>, values: Vec<f64>, bins: usize, range: Option<(f64, f64)>) -> PyResult<Py<PyAny>> {
    let h = moments::histogram(&values, bins, range).map_err(value_err)?;
    to_py(py, &h)
}

/// `(inside, outside)` of the closed window `center ± threshold`.
#[pyfunction]
#[pyo3(signature = (values, threshold, center="zero"))]
fn outlier_split(values: Vec<f64>, threshold: f64, center: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
    Ok(moments::outlier_split(&values, threshold, parse_center(center)?))
}

#[pyfunction]
#[pyo3(signature = (values, alpha=shape_classify::DEFAULT_ALPHA))]
fn extract_features(py: Python<'_>, values: Vec<f64>, alpha: f64) -> PyResult<Py<PyAny>> {
    let f = shape_classify::extract_features(&values, alpha).map_err(value_err)?;
    to_py(py, &f)
}

#[pyfunction]
fn default_thresholds(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &ClassifierThresholds::default())
}

/// Shape label of a feature pair.
#[pyfunction]
#[pyo3(signature = (kurt3s, center_mass, thresholds=None))]
fn classify(py: Python<'_>, kurt3s: f64, center_mass: f64, thresholds: Option<Bound<'_, PyAny>>) -> PyResult<String> {
    let t: ClassifierThresholds = match thresholds {
        Some(obj) => from_py(py, &obj)?,
        None => ClassifierThresholds::default(),
    };
    t.validate().map_err(value_err)?;
    let f = ShapeFeatures {
        kurt3s,
        center_mass,
        alpha: shape_classify::DEFAULT_ALPHA,
    };
    Ok(shape_classify::classify(&f, &t).to_string())
}

/// Thresholds from a list of `{noise_sigma, features, expected}` dicts.
#[pyfunction]
fn calibrate(py: Python<'_>, sweep: Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let points: Vec<SweepPoint> = from_py(py, &sweep)?;
    let t = shape_classify::calibrate_thresholds(&points).map_err(value_err)?;
    to_py(py, &t)
}

fn synth_spec(py: Python<'_>, config: Option<Bound<'_, PyAny>>) -> PyResult<SynthSpec> {
    match config {
        Some(obj) => from_py(py, &obj),
        None => Ok(SynthSpec::default()),
    }
}

/// Sparse synthetic signal; `config` keys override the defaults.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn gen_wstar(py: Python<'_>, config: Option<Bound<'_, PyAny>>) -> PyResult<Vec<f64>> {
    let spec = synth_spec(py, config)?;
    py.detach(|| synth::gen_wstar(&spec)).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (config=None, thresholds=None, bins=200, include_histograms=false))]
fn regime_sweep(
    py: Python<'_>,
    config: Option<Bound<'_, PyAny>>,
    thresholds: Option<Bound<'_, PyAny>>,
    bins: usize,
    include_histograms: bool,
) -> PyResult<Py<PyAny>> {
    let spec = synth_spec(py, config)?;
    let opts = SweepOptions {
        bins,
        thresholds: thresholds.map(|t| from_py(py, &t)).transpose()?,
        ..Default::default()
    };
    let out = py.detach(|| synth::run_regime_sweep(&spec, &opts)).map_err(value_err)?;
    let mut value = serde_json::to_value(&out).map_err(value_err)?;
    if !include_histograms {
        for r in value["reports"].as_array_mut().into_iter().flatten() {
            r.as_object_mut().map(|o| o.remove("histogram"));
        }
    }
    to_py(py, &value)
}

/// Read-only view of a safetensors checkpoint.
#[pyclass(module = "weightscope_py")]
struct Checkpoint {
    index: ModelIndex,
}

#[pymethods]
impl Checkpoint {
    #[new]
    fn new(path: &str) -> PyResult<Self> {
        Ok(Checkpoint {
            index: tensor_io::read_header(path).map_err(io_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.index.len()
    }

    fn names(&self) -> Vec<String> {
        self.index.metas().iter().map(|m| m.name.clone()).collect()
    }

    fn metadata(&self) -> Option<BTreeMap<String, String>> {
        self.index.metadata().cloned()
    }

    /// `{name, dtype, shape, numel}` per tensor, header order.
    fn tensors(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let metas: Vec<_> = self
            .index
            .metas()
            .iter()
            .map(|m| serde_json::json!({"name": m.name, "dtype": m.dtype, "shape": m.shape, "numel": m.numel()}))
            .collect();
        to_py(py, &metas)
    }

    /// Values of one float tensor, flattened row-major.
    fn load(&self, name: &str) -> PyResult<Vec<f64>> {
        Ok(self.index.load_tensor(name).map_err(io_err)?.values)
    }

    /// One summary per float tensor whose name matches `pattern`.
    #[pyo3(signature = (pattern=None, sigma_k=Some(3.0), min_magnitude=None, center="mean"))]
    fn inspect(
        &self,
        py: Python<'_>,
        pattern: Option<&str>,
        sigma_k: Option<f64>,
        min_magnitude: Option<f64>,
        center: &str,
    ) -> PyResult<Py<PyAny>> {
        let re = pattern.map(Regex::new).transpose().map_err(value_err)?;
        let filter = filter_spec(sigma_k, min_magnitude, center)?;
        let mut rows = Vec::new();
        for entry in self.index.iter_tensors(re.as_ref()) {
            if let TensorEntry::Tensor(t) = entry.map_err(io_err)? {
                let s = moments::summarize(&t.values, filter.as_ref()).map_err(value_err)?;
                rows.push(serde_json::json!({"tensor": t.name, "dtype": t.source_dtype, "shape": t.shape, "stats": s}));
            }
        }
        to_py(py, &rows)
    }
}

/// Writes `{name: (shape, values)}` as a safetensors file.
#[pyfunction]
#[pyo3(signature = (path, tensors, dtype="F32"))]
fn save_tensors(path: &str, tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>, dtype: &str) -> PyResult<()> {
    let dtype = DType::parse(dtype);
    if !dtype.is_float() {
        return Err(value_err(format!("{dtype} is not a float dtype")));
    }
    let entries = tensors
        .into_iter()
        .map(|(name, (shape, values))| {
            TensorRecord::new(name, shape, values).map(|r| WriteEntry::float(r, dtype.clone()))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err)?;
    tensor_io::write_model(path, &entries, &WriteOptions::default()).map_err(io_err)
}

fn merge_options(t: f64, mode: &str, center: &str) -> PyResult<MergeOptions> {
    let mode = match mode {
        "outlier" | "outlier_aware" => MergeMode::OutlierAware,
        "average" => MergeMode::Average,
        "sum" => MergeMode::Sum,
        other => return Err(value_err(format!("unknown merge mode {other:?}"))),
    };
    Ok(MergeOptions {
        t,
        mode,
        center: parse_center(center)?,
        ..Default::default()
    })
}

/// Merges one parameter group given as flat lists; returns the merged values.
#[pyfunction]
#[pyo3(signature = (base, finetuned, t=2.0, mode="outlier", center="zero"))]
fn merge_arrays(base: Vec<f64>, finetuned: Vec<Vec<f64>>, t: f64, mode: &str, center: &str) -> PyResult<Vec<f64>> {
    let opts = merge_options(t, mode, center)?;
    let rec = |v: Vec<f64>| TensorRecord::new("w", vec![v.len()], v).map_err(io_err);
    let base = vec![rec(base)?];
    let models = finetuned.into_iter().map(|v| rec(v).map(|r| vec![r])).collect::<PyResult<Vec<_>>>()?;
    let tv = TaskVectorSet::from_records(&base, &models).map_err(value_err)?;
    let merged = wmerge::merge(&tv, &opts).map_err(value_err)?;
    Ok(merged.record("w").expect("merged group").values.clone())
}

/// Merges checkpoint files into `out`; returns the per-group report.
#[pyfunction]
#[pyo3(signature = (base, models, out, t=2.0, mode="outlier", center="zero"))]
fn merge_files(
    py: Python<'_>,
    base: &str,
    models: Vec<String>,
    out: &str,
    t: f64,
    mode: &str,
    center: &str,
) -> PyResult<Py<PyAny>> {
    let opts = merge_options(t, mode, center)?;
    let base = tensor_io::read_header(base).map_err(io_err)?;
    let models = models
        .iter()
        .map(tensor_io::read_header)
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err)?;
    let file = std::fs::File::create(out).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let (_, report) = py
        .detach(|| wmerge::merge_checkpoints(&base, &models, &opts, OutputDType::Base, std::io::BufWriter::new(file)))
        .map_err(value_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn make_delta(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    rows_of(&noise_adapt::make_delta(rows, cols, seed).values)
}

/// `⟨G, ΔW⟩_F`.
#[pyfunction]
fn grad_s(upstream: Vec<Vec<f64>>, delta: Vec<Vec<f64>>) -> PyResult<f64> {
    let delta = NoiseDelta {
        seed: 0,
        values: matrix(delta)?,
    };
    noise_adapt::grad_s(&matrix(upstream)?, &delta).map_err(value_err)
}

#[pyfunction]
fn apply_scaled_noise(w: Vec<Vec<f64>>, delta: Vec<Vec<f64>>, s: f64) -> PyResult<Vec<Vec<f64>>> {
    let delta = NoiseDelta {
        seed: 0,
        values: matrix(delta)?,
    };
    Ok(rows_of(&noise_adapt::apply_scaled_noise(&matrix(w)?, &delta, s).map_err(value_err)?))
}

#[pyfunction]
fn apply_lora_ours(w: Vec<Vec<f64>>, s: f64, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let out = noise_adapt::apply_lora_ours(&matrix(w)?, s, &matrix(a)?, &matrix(b)?).map_err(value_err)?;
    Ok(rows_of(&out))
}

fn toy_spec(py: Python<'_>, spec: Option<Bound<'_, PyAny>>) -> PyResult<ToyTaskSpec> {
    match spec {
        Some(obj) => from_py(py, &obj),
        None => Ok(ToyTaskSpec::default()),
    }
}

#[pyfunction]
#[pyo3(signature = (spec=None))]
fn toy_train(py: Python<'_>, spec: Option<Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let spec = toy_spec(py, spec)?;
    let r = noise_adapt::toy_train(&spec).map_err(value_err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (spec=None))]
fn closed_form_s(py: Python<'_>, spec: Option<Bound<'_, PyAny>>) -> PyResult<f64> {
    let spec = toy_spec(py, spec)?;
    let delta = noise_adapt::make_delta(spec.out_dim, spec.in_dim, spec.delta_seed);
    noise_adapt::closed_form_s(&spec, &delta).map_err(value_err)
}

#[pyfunction]
fn delta_sigma_report(
    py: Python<'_>,
    deltas_a: BTreeMap<String, Vec<f64>>,
    deltas_b: BTreeMap<String, Vec<f64>>,
) -> PyResult<Py<PyAny>> {
    let r = noise_adapt::delta_sigma_report(&deltas_a, &deltas_b).map_err(value_err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (deltas, exclude_ends=false))]
fn depth_trend(py: Python<'_>, deltas: BTreeMap<usize, Vec<f64>>, exclude_ends: bool) -> PyResult<Py<PyAny>> {
    let r = noise_adapt::depth_trend(&deltas, exclude_ends).map_err(value_err)?;
    to_py(py, &r)
}

#[pymodule]
fn weightscope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(outlier_split, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(default_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(gen_wstar, m)?)?;
    m.add_function(wrap_pyfunction!(regime_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(save_tensors, m)?)?;
    m.add_function(wrap_pyfunction!(merge_arrays, m)?)?;
    m.add_function(wrap_pyfunction!(merge_files, m)?)?;
    m.add_function(wrap_pyfunction!(make_delta, m)?)?;
    m.add_function(wrap_pyfunction!(grad_s, m)?)?;
    m.add_function(wrap_pyfunction!(apply_scaled_noise, m)?)?;
    m.add_function(wrap_pyfunction!(apply_lora_ours, m)?)?;
    m.add_function(wrap_pyfunction!(toy_train, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_s, m)?)?;
    m.add_function(wrap_pyfunction!(delta_sigma_report, m)?)?;
    m.add_function(wrap_pyfunction!(depth_trend, m)?)?;
    Ok(())
}
