use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use regex::Regex;
use serde::Serialize;
use serde_json::json;

use weightscope::merge::{merge_checkpoints, MergeMode, MergeOptions};
use weightscope::moments::{histogram, summarize, Moments, PooledSummary, StatsSummary};
use weightscope::noise_adapt::{depth_trend_from_sigmas, toy_train, DeltaSigmaReport, ToyTaskSpec};
use weightscope::shape_classify::{classify, extract_features, ClassifierThresholds};
use weightscope::synth::{add_noise, gen_wstar, level_seed, run_regime_sweep, SweepOptions, SynthSpec};
use weightscope::tensor_io::{
    read_header, DType, ModelIndex, ModelWriter, PlannedTensor, TensorMeta, WriteOptions,
};

use crate::args::*;
use crate::report::Report;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_EMPTY: i32 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn empty(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_EMPTY,
            error: anyhow::anyhow!(message.into()),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            error: anyhow::anyhow!(message.into()),
        }
    }
}

pub trait Classify<T> {
    fn input(self) -> Result<T, Failure>;
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_INPUT,
            error: e.into(),
        })
    }

    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_INTERNAL,
            error: e.into(),
        })
    }
}

type Outcome = Result<Report, Failure>;

fn open(path: &Path, report: &mut Report) -> Result<ModelIndex, Failure> {
    report.add_input(path).input()?;
    read_header(path).input()
}

fn compile(pattern: Option<&str>) -> Result<Option<Regex>, Failure> {
    pattern.map(Regex::new).transpose().input()
}

/// Float tensors whose name matches, sorted by name; matching non-float
/// tensors produce a warning.
fn select_float(idx: &ModelIndex, re: Option<&Regex>, report: &mut Report) -> Vec<TensorMeta> {
    let mut out = Vec::new();
    for m in idx.metas() {
        if re.is_some_and(|r| !r.is_match(&m.name)) {
            continue;
        }
        if m.dtype.is_float() {
            out.push(m.clone());
        } else {
            report.warn(format!("skipped non-float tensor {} ({})", m.name, m.dtype));
        }
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

#[derive(Serialize)]
struct StatsRow {
    tensor: String,
    dtype: String,
    shape: String,
    numel: usize,
    #[serde(flatten)]
    stats: StatsSummary,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn inspect(a: &InspectArgs) -> Outcome {
    let mut report = Report::new("inspect");
    let idx = open(&a.file, &mut report)?;
    let re = compile(a.pattern.as_deref())?;
    let filter = a.filter.spec();
    if let Some(f) = &filter {
        f.validate().input()?;
    }
    let metas = select_float(&idx, re.as_ref(), &mut report);
    if metas.is_empty() {
        return Err(Failure::empty("no float tensors selected"));
    }

    let results = metas
        .par_iter()
        .map(|m| idx.load_tensor(&m.name).map(|r| summarize(&r.values, filter.as_ref())))
        .collect::<Result<Vec<_>, _>>()
        .input()?;
    let mut ok = Vec::new();
    for (m, res) in metas.iter().zip(results) {
        match res {
            Ok(stats) => {
                ok.push(stats.clone());
                report.push_row(StatsRow {
                    tensor: m.name.clone(),
                    dtype: m.dtype.to_string(),
                    shape: shape_str(&m.shape),
                    numel: m.numel(),
                    stats,
                });
            }
            Err(e) => report.warn(format!("{}: {e}", m.name)),
        }
    }
    if ok.is_empty() {
        return Err(Failure::empty("no tensor produced statistics"));
    }

    let numel: usize = metas.iter().map(TensorMeta::numel).sum();
    let average = StatsSummary {
        count: ok.iter().map(|s| s.count).sum(),
        mean: mean_of(ok.iter().map(|s| Some(s.mean))).unwrap(),
        std: mean_of(ok.iter().map(|s| Some(s.std))).unwrap(),
        skewness: mean_of(ok.iter().map(|s| s.skewness)),
        kurtosis: mean_of(ok.iter().map(|s| s.kurtosis)),
        retain_ratio: mean_of(ok.iter().map(|s| Some(s.retain_ratio))).unwrap(),
        small_frac: mean_of(ok.iter().map(|s| Some(s.small_frac))).unwrap(),
        nonfinite_count: ok.iter().map(|s| s.nonfinite_count).sum(),
    };
    report.push_row(StatsRow {
        tensor: "__average__".into(),
        dtype: String::new(),
        shape: String::new(),
        numel,
        stats: average,
    });

    let mut pooled = PooledSummary::new(filter.as_ref()).input()?;
    for m in &metas {
        pooled.observe(&idx.load_tensor(&m.name).input()?.values);
    }
    for m in &metas {
        pooled.accumulate(&idx.load_tensor(&m.name).input()?.values);
    }
    match pooled.finish() {
        Ok(stats) => report.push_row(StatsRow {
            tensor: "__pooled__".into(),
            dtype: String::new(),
            shape: String::new(),
            numel,
            stats,
        }),
        Err(e) => report.warn(format!("pooled summary: {e}")),
    }
    report.set_summary(json!({ "filter": filter, "tensors": metas.len() }));
    Ok(report)
}

fn load_thresholds(path: Option<&PathBuf>, report: &mut Report) -> Result<Option<ClassifierThresholds>, Failure> {
    let Some(path) = path else { return Ok(None) };
    if !path.exists() {
        report.warn(format!("thresholds file {} not found, using built-in defaults", path.display()));
        return Ok(None);
    }
    report.add_input(path).input()?;
    ClassifierThresholds::load(path).input().map(Some)
}

pub fn classify_cmd(a: &ClassifyArgs) -> Outcome {
    let mut report = Report::new("classify");
    let idx = open(&a.file, &mut report)?;
    let re = compile(a.pattern.as_deref())?;
    let thresholds = load_thresholds(a.thresholds.as_ref(), &mut report)?.unwrap_or_default();
    let metas = select_float(&idx, re.as_ref(), &mut report);
    if metas.is_empty() {
        return Err(Failure::empty("no float tensors selected"));
    }
    let results = metas
        .par_iter()
        .map(|m| idx.load_tensor(&m.name).map(|r| extract_features(&r.values, a.alpha)))
        .collect::<Result<Vec<_>, _>>()
        .input()?;
    for (m, res) in metas.iter().zip(results) {
        match res {
            Ok(f) => report.push_row(json!({
                "tensor": m.name,
                "dtype": m.dtype.to_string(),
                "shape": shape_str(&m.shape),
                "numel": m.numel(),
                "kurt3s": f.kurt3s,
                "center_mass": f.center_mass,
                "alpha": f.alpha,
                "class": classify(&f, &thresholds),
            })),
            Err(e) => report.warn(format!("{}: {e}", m.name)),
        }
    }
    if report.rows.is_empty() {
        return Err(Failure::empty("no tensor could be classified"));
    }
    report.set_summary(json!({ "thresholds": thresholds }));
    Ok(report)
}

pub fn synth(a: &SynthArgs) -> Outcome {
    let mut report = Report::new("synth");
    let mut spec = match &a.config {
        Some(path) => {
            report.add_input(path).input()?;
            let text = fs::read_to_string(path).input()?;
            serde_json::from_str::<SynthSpec>(&text).input()?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.total_points {
        spec.total_points = n;
    }
    if let Some(n) = a.nonzero_points {
        spec.nonzero_points = n;
    }
    if let Some(levels) = &a.noise_levels {
        spec.noise_levels = levels.clone();
    }
    spec.validate().input()?;
    let opts = SweepOptions {
        alpha: a.alpha,
        bins: a.bins,
        thresholds: load_thresholds(a.thresholds.as_ref(), &mut report)?,
    };
    let outcome = run_regime_sweep(&spec, &opts).input()?;
    if outcome.reports.is_empty() {
        return Err(Failure::empty("no noise levels"));
    }

    for (i, r) in outcome.reports.iter().enumerate() {
        report.push_row(json!({
            "level": i,
            "noise_sigma": r.noise_sigma,
            "expected": r.expected,
            "shape": r.shape,
            "kurt3s": r.features.kurt3s,
            "center_mass": r.features.center_mass,
            "retain_ratio": r.stats.retain_ratio,
            "mean": r.stats.mean,
            "std": r.stats.std,
            "skewness": r.stats.skewness,
            "kurtosis": r.stats.kurtosis,
            "raw_skewness": r.raw.skewness,
            "raw_kurtosis": r.raw.kurtosis,
        }));
    }
    if let Some(dir) = &a.hist_dir {
        fs::create_dir_all(dir).internal()?;
        for (i, r) in outcome.reports.iter().enumerate() {
            let path = dir.join(format!("level{i}_sigma{}.csv", r.noise_sigma));
            let mut w = csv::Writer::from_path(&path).internal()?;
            w.write_record(["bin_center", "count"]).internal()?;
            for (c, n) in r.histogram.rows() {
                w.write_record([c.to_string(), n.to_string()]).internal()?;
            }
            w.flush().internal()?;
        }
    }
    if let Some(path) = &a.save_thresholds {
        outcome.thresholds.save(path).internal()?;
    }
    if let Some(path) = &a.write_checkpoint {
        write_sweep_checkpoint(&spec, path).internal()?;
    }
    let (agree, labelled) = outcome.agreement();
    if agree < labelled {
        report.warn(format!("{agree}/{labelled} levels match the reference regimes"));
    }
    report.set_summary(json!({
        "spec": outcome.spec,
        "signal_nonzero": outcome.signal_nonzero,
        "thresholds": outcome.thresholds,
        "threshold_source": outcome.threshold_source,
        "agreement": [agree, labelled],
    }));
    Ok(report)
}

/// `signal` plus one `level.{i}` tensor per noise level, stored as F32.
fn write_sweep_checkpoint(spec: &SynthSpec, path: &Path) -> anyhow::Result<()> {
    let signal = gen_wstar(spec)?;
    let mut plan = vec![PlannedTensor {
        name: "signal".into(),
        dtype: DType::F32,
        shape: vec![signal.len()],
    }];
    for i in 0..spec.noise_levels.len() {
        plan.push(PlannedTensor {
            name: format!("level.{i}"),
            dtype: DType::F32,
            shape: vec![signal.len()],
        });
    }
    let metadata = BTreeMap::from([("synth_spec".to_string(), serde_json::to_string(spec)?)]);
    let file = BufWriter::new(File::create(path)?);
    let mut w = ModelWriter::new(
        file,
        plan,
        WriteOptions {
            metadata: Some(metadata),
            ..Default::default()
        },
    )?;
    w.write_float(&signal)?;
    for (i, &sigma) in spec.noise_levels.iter().enumerate() {
        w.write_float(&add_noise(&signal, sigma, level_seed(spec.seed, i)))?;
    }
    w.finish()?.flush()?;
    Ok(())
}

pub fn merge(a: &MergeArgs) -> Outcome {
    let mut report = Report::new("merge");
    let base = open(&a.base, &mut report)?;
    let models = a
        .models
        .iter()
        .map(|p| open(p, &mut report))
        .collect::<Result<Vec<_>, _>>()?;
    if base.is_empty() {
        return Err(Failure::empty("base checkpoint has no tensors"));
    }
    let opts = MergeOptions {
        t: a.t,
        mode: match a.mode {
            ModeArg::Outlier => MergeMode::OutlierAware,
            ModeArg::Average => MergeMode::Average,
            ModeArg::Sum => MergeMode::Sum,
        },
        center: a.center.into(),
        non_float_policy: a.non_float.into(),
    };
    opts.validate().input()?;

    let tmp = a.out.with_extension("partial");
    let file = BufWriter::new(File::create(&tmp).internal()?);
    let result = merge_checkpoints(&base, &models, &opts, a.output_dtype.into(), file);
    let (mut w, groups) = match result {
        Ok(v) => v,
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            return Err(e).input();
        }
    };
    w.flush().internal()?;
    drop(w);
    fs::rename(&tmp, &a.out).internal()?;
    for g in groups {
        report.push_row(g);
    }
    report.set_summary(json!({
        "options": opts,
        "n_models": models.len(),
        "output": a.out.display().to_string(),
    }));
    Ok(report)
}

/// Moments of `ft − base` for one tensor name.
fn delta_moments(base: &ModelIndex, ft: &ModelIndex, name: &str, which: &str) -> Result<Moments, Failure> {
    let b = base.load_tensor(name).input()?;
    let f = ft
        .load_tensor(name)
        .map_err(|_| Failure::input(format!("{which} lacks tensor {name} or it is not readable")))?;
    if f.shape != b.shape {
        return Err(Failure::input(format!(
            "{which}: tensor {name} has shape {:?}, base has {:?}",
            f.shape, b.shape
        )));
    }
    let delta: Vec<f64> = f.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    Ok(Moments::of(&delta).unwrap_or_default())
}

pub fn compare_delta(a: &CompareDeltaArgs) -> Outcome {
    let mut report = Report::new("compare-delta");
    let base = open(&a.base, &mut report)?;
    let fa = open(&a.a, &mut report)?;
    let fb = open(&a.b, &mut report)?;
    let re = compile(a.pattern.as_deref())?;
    let metas = select_float(&base, re.as_ref(), &mut report);
    if metas.is_empty() {
        return Err(Failure::empty("no float tensors selected"));
    }
    let sigmas = metas
        .par_iter()
        .map(|m| {
            let sa = delta_moments(&base, &fa, &m.name, "--a")?.std();
            let sb = delta_moments(&base, &fb, &m.name, "--b")?.std();
            Ok((m.name.clone(), sa, sb))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let r = DeltaSigmaReport::from_sigmas(sigmas);
    for l in &r.per_layer {
        report.push_row(l);
    }
    report.set_summary(json!({ "mean_abs_diff": r.mean_abs_diff, "layers": r.per_layer.len() }));
    Ok(report)
}

pub fn depth_trend(a: &DepthTrendArgs) -> Outcome {
    let mut report = Report::new("depth-trend");
    let base = open(&a.base, &mut report)?;
    let ft = open(&a.ft, &mut report)?;
    let layer_re = Regex::new(&a.layer_regex).input()?;
    if layer_re.captures_len() < 2 {
        return Err(Failure::input("--layer-regex needs a capture group for the layer index"));
    }
    let re = compile(a.pattern.as_deref())?;
    let mut by_layer: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for m in select_float(&base, re.as_ref(), &mut report) {
        let Some(c) = layer_re.captures(&m.name) else { continue };
        let layer: usize = c[1]
            .parse()
            .map_err(|_| Failure::input(format!("layer index `{}` in {} is not an integer", &c[1], m.name)))?;
        by_layer.entry(layer).or_default().push(m.name.clone());
    }
    if by_layer.is_empty() {
        return Err(Failure::empty("no tensor matches --layer-regex"));
    }
    let pooled = by_layer
        .par_iter()
        .map(|(&layer, names)| {
            let mut m = Moments::default();
            for name in names {
                m = m.combine(&delta_moments(&base, &ft, name, "--ft")?);
            }
            Ok((layer, m.std()))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let trend = depth_trend_from_sigmas(pooled.clone(), a.exclude_ends).map_err(|e| Failure::empty(e.to_string()))?;
    for (layer, sigma) in &pooled {
        report.push_row(json!({
            "layer": layer,
            "sigma": sigma,
            "tensors": by_layer[layer].len(),
            "included": trend.per_layer_sigma.iter().any(|(l, _)| l == layer),
        }));
    }
    if !trend.rho_defined {
        report.warn("all included layers have the same σ; rank correlation undefined, reported as 0");
    }
    report.set_summary(json!({
        "spearman_rho": trend.spearman_rho,
        "rho_defined": trend.rho_defined,
        "exclude_ends": trend.exclude_ends,
    }));
    Ok(report)
}

pub fn toy_adapt(a: &ToyAdaptArgs) -> Outcome {
    let mut report = Report::new("toy-adapt");
    let defaults = ToyTaskSpec::default();
    let spec = ToyTaskSpec {
        in_dim: a.dims[0],
        out_dim: a.dims[1],
        rank: a.rank,
        n_samples: a.samples.unwrap_or(4 * a.dims[0]),
        sigma_true: a.sigma_true,
        seed: a.seed,
        delta_seed: a.delta_seed.unwrap_or(a.seed.wrapping_add(1)),
        learn_lora: a.mode == ToyMode::ScalarLora,
        learning_rate: a.learning_rate,
        max_steps: a.max_steps.unwrap_or(if a.mode == ToyMode::ScalarLora { 5000 } else { defaults.max_steps }),
        tol: a.tol,
    };
    spec.validate().input()?;
    let r = toy_train(&spec).internal()?;
    report.push_row(json!({
        "mode": if spec.learn_lora { "scalar+lora" } else { "scalar" },
        "sigma_true": spec.sigma_true,
        "s_learned": r.s_learned,
        "s_oracle": r.s_oracle,
        "abs_error": (r.s_learned - r.s_oracle).abs(),
        "converged": r.converged,
        "steps": r.loss_curve.len() - 1,
        "initial_loss": r.loss_curve[0],
        "final_loss": r.loss_curve.last(),
        "learning_rate": r.learning_rate,
    }));
    if !r.converged {
        report.warn(format!("|s_learned − s_oracle| ≥ tol ({})", spec.tol));
    }
    report.set_summary(json!({
        "spec": spec,
        "loss_curve": r.loss_curve,
        "a_mat": r.a_mat,
        "b_mat": r.b_mat,
    }));
    Ok(report)
}

pub fn hist(a: &HistArgs) -> Outcome {
    let mut report = Report::new("hist");
    let idx = open(&a.file, &mut report)?;
    let re = compile(a.pattern.as_deref())?;
    let mut metas = select_float(&idx, re.as_ref(), &mut report);
    if !a.tensor.is_empty() {
        for t in &a.tensor {
            if idx.meta(t).is_none() {
                return Err(Failure::input(format!("no tensor named {t}")));
            }
        }
        metas.retain(|m| a.tensor.contains(&m.name));
    }
    if metas.is_empty() {
        return Err(Failure::empty("no float tensors selected"));
    }
    let mut values = Vec::new();
    for m in &metas {
        values.extend(idx.load_tensor(&m.name).input()?.values);
    }
    let range = a.range.as_ref().map(|r| (r[0], r[1]));
    let h = histogram(&values, a.bins, range).map_err(|e| match e {
        weightscope::moments::StatsError::EmptyInput => Failure::empty(e.to_string()),
        _ => Failure::input(e.to_string()),
    })?;
    for (center, count) in h.rows() {
        report.push_row(json!({ "bin_center": center, "count": count }));
    }
    if a.ascii {
        eprint!("{}", h.render_ascii(60));
    }
    report.set_summary(json!({
        "tensors": metas.iter().map(|m| &m.name).collect::<Vec<_>>(),
        "lo": h.bin_edges.first(),
        "hi": h.bin_edges.last(),
        "underflow": h.underflow,
        "overflow": h.overflow,
    }));
    Ok(report)
}
