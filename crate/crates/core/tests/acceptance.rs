//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use weightscope::merge::{
    merge_average, merge_outlier_aware, merge_sum, MergeOptions, TaskVectorSet,
};
use weightscope::moments::{summarize, FilterSpec};
use weightscope::noise_adapt::{
    delta_sigma_report, depth_trend, grad_s, make_delta, toy_train, ToyTaskSpec,
};
use weightscope::rng::{normal_vec, stream};
use weightscope::shape_classify::ShapeClass;
use weightscope::synth::{run_regime_sweep, SweepOptions, SynthSpec};
use weightscope::tensor_io::{
    bf16_to_f64, f16_to_f64, read_header, write_model, DType, TensorRecord, WriteEntry,
    WriteOptions,
};

const TEST_DOMAIN: u64 = 0xACCE_0000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn a1() -> Outcome {
    let x = normal_vec(1_000_000, 0.0, 1.0, 2024, TEST_DOMAIN);
    let raw = summarize(&x, None).unwrap();
    let s3 = summarize(&x, Some(&FilterSpec::sigma(3.0))).unwrap();
    let s2 = summarize(&x, Some(&FilterSpec::sigma(2.0))).unwrap();
    let skew = raw.skewness.unwrap();
    let kurt = raw.kurtosis.unwrap();
    let pass = skew.abs() < 0.01
        && (kurt - 3.0).abs() < 0.05
        && (0.9963..=0.9983).contains(&s3.retain_ratio)
        && (0.952..=0.957).contains(&s2.retain_ratio);
    check(
        pass,
        format!(
            "skew {skew:.4} kurt {kurt:.4} retain3σ {:.5} retain2σ {:.5} (kurt after 3σ {:.4})",
            s3.retain_ratio,
            s2.retain_ratio,
            s3.kurtosis.unwrap()
        ),
    )
}

fn a2() -> Outcome {
    let spec = SynthSpec::default();
    let out = run_regime_sweep(&spec, &SweepOptions::default()).unwrap();
    use ShapeClass::*;
    let expected = [Line, Line, InvertedT, Sharp, Sharp, Gaussian, Gaussian, Gaussian];
    let levels = [0.001, 0.005, 0.01, 0.03, 0.05, 0.1, 0.2, 0.3];
    let got: Vec<ShapeClass> = out.reports.iter().map(|r| r.shape).collect();
    let sigmas: Vec<f64> = out.reports.iter().map(|r| r.noise_sigma).collect();
    let matches = got.iter().zip(&expected).filter(|(a, b)| a == b).count();
    let pass = got == expected && sigmas == levels && out.signal_nonzero < 2_000_000;
    check(
        pass,
        format!(
            "{matches}/8 regimes {got:?}, nonzero {} (thresholds {:?})",
            out.signal_nonzero, out.threshold_source
        ),
    )
}

fn random_instance(index: u64, max_side: usize, max_numel: usize) -> (Vec<TensorRecord>, Vec<Vec<TensorRecord>>) {
    let mut rng = stream(7, TEST_DOMAIN + 1, index);
    let n = *[2usize, 3, 5].choose(&mut rng).unwrap();
    let groups = rng.random_range(1..=3);
    let mut base = Vec::new();
    let mut models = vec![Vec::new(); n];
    for g in 0..groups {
        let (rows, cols) = loop {
            let r = rng.random_range(1..=max_side);
            let c = rng.random_range(1..=max_side);
            if r * c >= 2 && r * c <= max_numel {
                break (r, c);
            }
        };
        let name = format!("g{g}");
        let scale = rng.random_range(0.01..2.0);
        let seed = rng.random::<u64>();
        base.push(TensorRecord::new(&name, vec![rows, cols], normal_vec(rows * cols, 0.0, 1.0, seed, 0)).unwrap());
        for (i, m) in models.iter_mut().enumerate() {
            let mut v = normal_vec(rows * cols, 0.0, scale, seed, 1 + i as u64);
            // Heavy tails so that every window sees some outliers.
            for x in v.iter_mut().step_by(7) {
                *x *= 8.0;
            }
            let b = &base.last().unwrap().values;
            let w: Vec<f64> = v.iter().zip(b).map(|(d, b)| b + d).collect();
            m.push(TensorRecord::new(&name, vec![rows, cols], w).unwrap());
        }
    }
    (base, models)
}

fn values(m: &weightscope::merge::MergedModel, name: &str) -> Vec<f64> {
    m.record(name).unwrap().values.clone()
}

fn a3() -> Outcome {
    let mut worst_avg: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for i in 0..20 {
        let (base, models) = random_instance(i, 32, 1024);
        let tv = TaskVectorSet::from_records(&base, &models).unwrap();
        let avg = merge_average(&tv).unwrap();
        let sum = merge_sum(&tv).unwrap();
        let wide = merge_outlier_aware(&tv, &MergeOptions::outlier_aware(1e9)).unwrap();
        let zero = merge_outlier_aware(&tv, &MergeOptions::outlier_aware(0.0)).unwrap();
        for b in &base {
            for (x, y) in values(&wide, &b.name).iter().zip(values(&avg, &b.name)) {
                worst_avg = worst_avg.max((x - y).abs());
            }
            for (x, y) in values(&zero, &b.name).iter().zip(values(&sum, &b.name)) {
                worst_sum = worst_sum.max((x - y).abs());
            }
        }
    }
    check(
        worst_avg <= 1e-12 && worst_sum <= 1e-12,
        format!("max |t=1e9 − average| {worst_avg:.2e}, max |t=0 − sum| {worst_sum:.2e}"),
    )
}

/// Line-by-line reference of the outlier-aware merge.
fn naive_merge(base: &[f64], finetuned: &[&[f64]], t: f64) -> Vec<f64> {
    let n = finetuned.len();
    let deltas: Vec<Vec<f64>> = finetuned
        .iter()
        .map(|w| w.iter().zip(base).map(|(a, b)| a - b).collect())
        .collect();
    let mut sigma = f64::INFINITY;
    for d in &deltas {
        let len = d.len() as f64;
        let mut mean = 0.0;
        for x in d {
            mean += x;
        }
        mean /= len;
        let mut var = 0.0;
        for x in d {
            var += (x - mean) * (x - mean);
        }
        sigma = sigma.min((var / len).sqrt());
    }
    let threshold = t * sigma;
    let mut merged = Vec::with_capacity(base.len());
    for j in 0..base.len() {
        let mut parts = Vec::with_capacity(n);
        for d in &deltas {
            if d[j].abs() <= threshold {
                parts.push(d[j] * (1.0 / n as f64));
            } else {
                parts.push(d[j]);
            }
        }
        parts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut acc = 0.0;
        for p in parts {
            acc += p;
        }
        merged.push(base[j] + acc);
    }
    merged
}

fn a4() -> Outcome {
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    for i in 0..50 {
        let (base, models) = random_instance(1000 + i, 32, 333);
        let tv = TaskVectorSet::from_records(&base, &models).unwrap();
        for t in [2.0, 3.0] {
            let merged = merge_outlier_aware(&tv, &MergeOptions::outlier_aware(t)).unwrap();
            for (k, b) in base.iter().enumerate() {
                let fts: Vec<&[f64]> = models.iter().map(|m| m[k].values.as_slice()).collect();
                let want = naive_merge(&b.values, &fts, t);
                let got = values(&merged, &b.name);
                compared += want.len();
                mismatches += got.iter().zip(&want).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
            }
        }
    }

    let base = vec![TensorRecord::new("w", vec![2], vec![0.0, 0.0]).unwrap()];
    let models = vec![
        vec![TensorRecord::new("w", vec![2], vec![0.1, 5.0]).unwrap()],
        vec![TensorRecord::new("w", vec![2], vec![-0.1, 0.2]).unwrap()],
    ];
    let tv = TaskVectorSet::from_records(&base, &models).unwrap();
    let fixture = values(&merge_outlier_aware(&tv, &MergeOptions::outlier_aware(2.0)).unwrap(), "w");
    let fixture_ok = fixture.len() == 2 && fixture[0].abs() < 1e-15 && (fixture[1] - 5.1).abs() < 1e-15;
    let oracle_ok = naive_merge(&[0.0, 0.0], &[&[0.1, 5.0], &[-0.1, 0.2]], 2.0) == fixture;
    check(
        mismatches == 0 && fixture_ok && oracle_ok,
        format!("{mismatches} bit mismatches in {compared} elements; fixture {fixture:?}"),
    )
}

fn a5() -> Outcome {
    let mut worst_rel: f64 = 0.0;
    for i in 0..20 {
        let delta = make_delta(8, 8, 500 + i);
        let g = Array2::from_shape_vec((8, 8), normal_vec(64, 0.0, 1.0, i, TEST_DOMAIN + 2)).unwrap();
        let w = Array2::from_shape_vec((8, 8), normal_vec(64, 0.0, 1.0, i, TEST_DOMAIN + 3)).unwrap();
        let loss = |s: f64| (&w + &(&delta.values * s)).iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>();
        let h = 1e-5;
        let fd = (loss(0.5 + h) - loss(0.5 - h)) / (2.0 * h);
        let an = grad_s(&g, &delta).unwrap();
        worst_rel = worst_rel.max((fd - an).abs() / an.abs());
    }

    let mut worst_oracle: f64 = 0.0;
    for sigma_true in [0.0, 0.1, 0.3, 1.0] {
        let r = toy_train(&ToyTaskSpec {
            sigma_true,
            ..Default::default()
        })
        .unwrap();
        worst_oracle = worst_oracle.max((r.s_learned - r.s_oracle).abs());
    }

    let learned: Vec<f64> = (0..5)
        .map(|k| {
            toy_train(&ToyTaskSpec {
                sigma_true: 0.3,
                delta_seed: 100 + k,
                ..Default::default()
            })
            .unwrap()
            .s_learned
            .abs()
        })
        .collect();
    let spread = learned.iter().cloned().fold(f64::MIN, f64::max) - learned.iter().cloned().fold(f64::MAX, f64::min);
    check(
        worst_rel < 1e-6 && worst_oracle < 1e-3 && spread < 0.05,
        format!("grad rel err {worst_rel:.2e}, max |s − s*| {worst_oracle:.2e}, seed spread {spread:.2e}"),
    )
}

fn a6() -> Outcome {
    let n = 1_000_000;
    let wide = 650_000;
    let mut v = normal_vec(wide, 0.0, 0.1, 31, TEST_DOMAIN + 4);
    // N(0, 1e-8): variance 1e-8, std 1e-4.
    v.extend(normal_vec(n - wide, 0.0, 1e-4, 32, TEST_DOMAIN + 5));
    let sigma_only = summarize(&v, Some(&FilterSpec::sigma(3.0))).unwrap();
    let both = summarize(&v, Some(&FilterSpec::sigma(3.0).with_magnitude_min(1e-3))).unwrap();
    let (k1, k2) = (sigma_only.kurtosis.unwrap(), both.kurtosis.unwrap());
    check(
        k1 > 3.5 && (2.85..=3.15).contains(&k2),
        format!("kurtosis 3σ only {k1:.4}, 3σ + |w| ≥ 1e-3 {k2:.4} (small_frac {:.4})", both.small_frac),
    )
}

fn random_payload(rng: &mut impl Rng, dtype: &DType, numel: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for _ in 0..numel {
        loop {
            match dtype {
                DType::F32 => {
                    let bits: u32 = rng.random();
                    if f32::from_bits(bits).is_finite() {
                        out.extend_from_slice(&bits.to_le_bytes());
                        break;
                    }
                }
                DType::F16 | DType::BF16 => {
                    let bits: u16 = rng.random();
                    let x = if *dtype == DType::F16 { f16_to_f64(bits) } else { bf16_to_f64(bits) };
                    if x.is_finite() {
                        out.extend_from_slice(&bits.to_le_bytes());
                        break;
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    out
}

fn decode(dtype: &DType, bytes: &[u8]) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F16 => bytes.chunks_exact(2).map(|c| f16_to_f64(u16::from_le_bytes([c[0], c[1]]))).collect(),
        DType::BF16 => bytes.chunks_exact(2).map(|c| bf16_to_f64(u16::from_le_bytes([c[0], c[1]]))).collect(),
        _ => unreachable!(),
    }
}

fn a7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let mut tensors = 0usize;
    for i in 0..100u64 {
        let mut rng = stream(11, TEST_DOMAIN + 6, i);
        let count = rng.random_range(1..=50);
        let mut names: Vec<String> = (0..count).map(|k| format!("block.{k}.weight")).collect();
        names.shuffle(&mut rng);
        let mut expected = Vec::new();
        let mut entries = Vec::new();
        for name in &names {
            let dtype = [DType::F32, DType::F16, DType::BF16][rng.random_range(0..3)].clone();
            let rank = rng.random_range(0..=3);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=6)).collect();
            let numel = shape.iter().product::<usize>();
            let bytes = random_payload(&mut rng, &dtype, numel);
            let record = TensorRecord::with_dtype(name.as_str(), shape.clone(), decode(&dtype, &bytes), dtype.clone()).unwrap();
            entries.push(WriteEntry::float(record, dtype.clone()));
            expected.push((name.clone(), dtype, shape, bytes));
        }
        let path = dir.path().join(format!("m{i}.safetensors"));
        write_model(&path, &entries, &WriteOptions::default()).unwrap();
        let idx = read_header(&path).unwrap();
        let order: Vec<&str> = idx.metas().iter().map(|m| m.name.as_str()).collect();
        if order != names.iter().map(String::as_str).collect::<Vec<_>>() {
            failures.push(format!("checkpoint {i}: header order changed"));
        }
        for (name, dtype, shape, bytes) in &expected {
            let meta = idx.meta(name).unwrap();
            if &meta.dtype != dtype || &meta.shape != shape || idx.raw_bytes(name).unwrap() != bytes.as_slice() {
                failures.push(format!("checkpoint {i}: tensor {name} differs"));
            }
            tensors += 1;
        }
    }
    check(
        failures.is_empty(),
        format!("100 checkpoints, {tensors} tensors, {} failures {:?}", failures.len(), failures.first()),
    )
}

fn a8() -> Outcome {
    let layers: BTreeMap<String, Vec<f64>> =
        (0..6).map(|l| (format!("layers.{l}.q"), normal_vec(4096, 0.0, 0.02, l, TEST_DOMAIN + 7))).collect();
    let same = delta_sigma_report(&layers, &layers).unwrap();

    let c = 1.7;
    let scaled: BTreeMap<String, Vec<f64>> =
        layers.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| c * x).collect())).collect();
    let rep = delta_sigma_report(&layers, &scaled).unwrap();
    let scale_err = rep
        .per_layer
        .iter()
        .map(|l| (l.abs_diff - (c - 1.0).abs() * l.sigma_a).abs())
        .fold(0.0, f64::max);

    let mut jitter = stream(13, TEST_DOMAIN + 8, 0);
    let ladder: BTreeMap<usize, Vec<f64>> = (0..24)
        .map(|l| {
            let sd = 0.01 * (1.0 + l as f64) + jitter.random_range(-1e-4..1e-4);
            (l, normal_vec(20_000, 0.0, sd, l as u64, TEST_DOMAIN + 9))
        })
        .collect();
    let trend = depth_trend(&ladder, true).unwrap();
    check(
        same.mean_abs_diff == 0.0 && scale_err <= 1e-12 && trend.spearman_rho > 0.95,
        format!(
            "identical mean diff {}, scale error {scale_err:.2e}, ladder ρ {:.4}",
            same.mean_abs_diff, trend.spearman_rho
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 8] = [
        ("A1 gaussian self-validation", a1, Some(Duration::from_secs(2))),
        ("A2 synthetic regime sweep", a2, Some(Duration::from_secs(60))),
        ("A3 merge limit laws", a3, Some(Duration::from_secs(1))),
        ("A4 merge oracle equivalence", a4, None),
        ("A5 scalar adaptation", a5, Some(Duration::from_secs(5))),
        ("A6 magnitude-filter kurtosis", a6, None),
        ("A7 file format round trip", a7, None),
        ("A8 depth trend and sigma report", a8, None),
    ];
    let mut failed = 0;
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed < l);
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        let timing = match limit {
            Some(l) => format!("{:.2}s / limit {:.0}s", elapsed.as_secs_f64(), l.as_secs_f64()),
            None => format!("{:.2}s", elapsed.as_secs_f64()),
        };
        println!(
            "{} {name}: {} [{timing}]",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
