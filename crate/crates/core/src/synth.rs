//! Synthetic sparse weights under additive Gaussian noise.
//!
//! The generated signal has `total_points` entries of which `nonzero_points`
//! are drawn: a fixed share of them are outliers with magnitude uniform in
//! `outlier_band`, the rest are N(0, gauss_sigma²) draws truncated to zero
//! outside `[trunc_min_abs, trunc_max_abs]`. Noise of increasing σ is then
//! added and each noisy copy is summarized and assigned a shape regime.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moments::{histogram, summarize, FilterSpec, Histogram, StatsError, StatsSummary};
use crate::rng::{self, domain};
use crate::shape_classify::{
    calibrate_thresholds, classify, extract_features, ClassifierThresholds, ClassifyError,
    ShapeClass, ShapeFeatures, SweepPoint, DEFAULT_ALPHA,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutlierSigns {
    /// ±1 with equal probability.
    #[default]
    Symmetric,
    Positive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub total_points: usize,
    pub nonzero_points: usize,
    pub outlier_frac: f64,
    pub outlier_band: (f64, f64),
    pub outlier_signs: OutlierSigns,
    pub gauss_sigma: f64,
    pub trunc_min_abs: f64,
    pub trunc_max_abs: f64,
    pub noise_levels: Vec<f64>,
    pub seed: u64,
}

pub const REFERENCE_NOISE_LEVELS: [f64; 8] = [0.001, 0.005, 0.01, 0.03, 0.05, 0.1, 0.2, 0.3];

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            total_points: 10_000_000,
            nonzero_points: 2_000_000,
            outlier_frac: 0.005,
            outlier_band: (0.6, 1.0),
            outlier_signs: OutlierSigns::Symmetric,
            gauss_sigma: 0.1,
            trunc_min_abs: 0.001,
            trunc_max_abs: 0.5,
            noise_levels: REFERENCE_NOISE_LEVELS.to_vec(),
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.nonzero_points > self.total_points {
            return bad(format!(
                "nonzero_points {} exceeds total_points {}",
                self.nonzero_points, self.total_points
            ));
        }
        if !(self.trunc_min_abs > 0.0 && self.trunc_min_abs < self.trunc_max_abs) {
            return bad("need 0 < trunc_min_abs < trunc_max_abs".into());
        }
        if !(self.outlier_band.0 < self.outlier_band.1) || self.outlier_band.0 < 0.0 {
            return bad("outlier_band must be an increasing non-negative interval".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_frac) {
            return bad("outlier_frac must lie in [0, 1]".into());
        }
        if !(self.gauss_sigma > 0.0 && self.gauss_sigma.is_finite()) {
            return bad("gauss_sigma must be > 0".into());
        }
        if self.noise_levels.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("noise levels must be > 0".into());
        }
        if self.total_points > u32::MAX as usize {
            return bad("total_points exceeds 2^32 - 1".into());
        }
        Ok(())
    }

    pub fn outlier_count(&self) -> usize {
        (self.outlier_frac * self.nonzero_points as f64).ceil() as usize
    }
}

/// The sparse signal. Deterministic in `spec.seed`.
pub fn gen_wstar(spec: &SynthSpec) -> Result<Vec<f64>, SynthError> {
    spec.validate()?;
    let mut out = vec![0.0; spec.total_points];
    if spec.nonzero_points == 0 {
        return Ok(out);
    }
    let mut layout = rng::stream(spec.seed, domain::WSTAR_LAYOUT, 0);
    let mut positions = index::sample(&mut layout, spec.total_points, spec.nonzero_points).into_vec();
    positions.shuffle(&mut layout);
    let n_out = spec.outlier_count().min(positions.len());

    let mut draws = rng::stream(spec.seed, domain::WSTAR_VALUES, 0);
    let (lo, hi) = spec.outlier_band;
    for &p in &positions[..n_out] {
        let magnitude = draws.random_range(lo..hi);
        let negative = spec.outlier_signs == OutlierSigns::Symmetric && draws.random::<bool>();
        out[p] = if negative { -magnitude } else { magnitude };
    }
    for &p in &positions[n_out..] {
        let v: f64 = spec.gauss_sigma * draws.sample::<f64, _>(StandardNormal);
        let a = v.abs();
        out[p] = if a < spec.trunc_min_abs || a > spec.trunc_max_abs { 0.0 } else { v };
    }
    Ok(out)
}

/// `values + ε`, ε i.i.d. N(0, noise_sigma²) from the noise stream of `seed`.
pub fn add_noise(values: &[f64], noise_sigma: f64, seed: u64) -> Vec<f64> {
    let mut out = values.to_vec();
    add_noise_in_place(&mut out, noise_sigma, seed);
    out
}

pub fn add_noise_in_place(values: &mut [f64], noise_sigma: f64, seed: u64) {
    if noise_sigma == 0.0 {
        return;
    }
    values
        .par_chunks_mut(rng::CHUNK)
        .enumerate()
        .for_each(|(i, chunk)| {
            let mut r = rng::stream(seed, domain::NOISE, i as u64);
            for x in chunk {
                *x += noise_sigma * r.sample::<f64, _>(StandardNormal);
            }
        });
}

/// Seed of the noise added at position `level_index` of a sweep.
pub fn level_seed(seed: u64, level_index: usize) -> u64 {
    seed ^ level_index as u64
}

/// Regime the reference experiment reports for a noise level, if it is one
/// of the eight reference levels.
pub fn reference_regime(noise_sigma: f64) -> Option<ShapeClass> {
    let is = |x: f64| (noise_sigma - x).abs() < 1e-12;
    if is(0.001) || is(0.005) {
        Some(ShapeClass::Line)
    } else if is(0.01) {
        Some(ShapeClass::InvertedT)
    } else if is(0.03) || is(0.05) {
        Some(ShapeClass::Sharp)
    } else if is(0.1) || is(0.2) || is(0.3) {
        Some(ShapeClass::Gaussian)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub noise_sigma: f64,
    /// 3σ-windowed statistics.
    pub stats: StatsSummary,
    /// Statistics of the whole noisy sample.
    pub raw: StatsSummary,
    pub features: ShapeFeatures,
    pub shape: ShapeClass,
    pub expected: Option<ShapeClass>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Provided,
    /// Calibrated on this sweep against the reference regimes.
    Calibrated,
    Default,
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub alpha: f64,
    pub bins: usize,
    /// Classify with these; otherwise calibrate when every level is a
    /// reference level, else fall back to the defaults.
    pub thresholds: Option<ClassifierThresholds>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            alpha: DEFAULT_ALPHA,
            bins: 200,
            thresholds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub spec: SynthSpec,
    pub signal_nonzero: usize,
    pub thresholds: ClassifierThresholds,
    pub threshold_source: ThresholdSource,
    pub reports: Vec<RegimeReport>,
}

impl SweepOutcome {
    pub fn agreement(&self) -> (usize, usize) {
        let labelled: Vec<_> = self.reports.iter().filter_map(|r| r.expected.map(|e| e == r.shape)).collect();
        (labelled.iter().filter(|ok| **ok).count(), labelled.len())
    }
}

/// Generates the signal once, then one independently seeded noisy copy per
/// level.
pub fn run_regime_sweep(spec: &SynthSpec, opts: &SweepOptions) -> Result<SweepOutcome, SynthError> {
    let signal = gen_wstar(spec)?;
    let signal_nonzero = signal.par_iter().filter(|x| **x != 0.0).count();

    struct Level {
        sigma: f64,
        stats: StatsSummary,
        raw: StatsSummary,
        features: ShapeFeatures,
        histogram: Histogram,
    }
    let mut levels = Vec::with_capacity(spec.noise_levels.len());
    let mut noisy = vec![0.0; signal.len()];
    for (i, &sigma) in spec.noise_levels.iter().enumerate() {
        noisy.copy_from_slice(&signal);
        add_noise_in_place(&mut noisy, sigma, level_seed(spec.seed, i));
        levels.push(Level {
            sigma,
            stats: summarize(&noisy, Some(&FilterSpec::sigma(3.0)))?,
            raw: summarize(&noisy, None)?,
            features: extract_features(&noisy, opts.alpha)?,
            histogram: histogram(&noisy, opts.bins, None)?,
        });
    }

    let labels: Vec<Option<ShapeClass>> = levels.iter().map(|l| reference_regime(l.sigma)).collect();
    let (thresholds, threshold_source) = match opts.thresholds {
        Some(t) => {
            t.validate()?;
            (t, ThresholdSource::Provided)
        }
        None if !labels.is_empty() && labels.iter().all(Option::is_some) => {
            let sweep: Vec<SweepPoint> = levels
                .iter()
                .zip(&labels)
                .map(|(l, e)| SweepPoint {
                    noise_sigma: l.sigma,
                    features: l.features,
                    expected: e.unwrap(),
                })
                .collect();
            match calibrate_thresholds(&sweep) {
                Ok(t) => (t, ThresholdSource::Calibrated),
                // Partial sweeps (missing regimes) cannot be calibrated.
                Err(ClassifyError::Inseparable { .. }) => {
                    (ClassifierThresholds::default(), ThresholdSource::Default)
                }
                Err(e) => return Err(e.into()),
            }
        }
        None => (ClassifierThresholds::default(), ThresholdSource::Default),
    };

    let reports = levels
        .into_iter()
        .zip(labels)
        .map(|(l, expected)| RegimeReport {
            noise_sigma: l.sigma,
            shape: classify(&l.features, &thresholds),
            stats: l.stats,
            raw: l.raw,
            features: l.features,
            expected,
            histogram: l.histogram,
        })
        .collect();
    Ok(SweepOutcome {
        spec: spec.clone(),
        signal_nonzero,
        thresholds,
        threshold_source,
        reports,
    })
}
