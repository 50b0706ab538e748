//! Shape regimes of weight distributions.
//!
//! Two scale-invariant features drive the decision:
//! - `kurt3s`: kurtosis after a 3σ window around the sample mean;
//! - `center_mass`: fraction of the windowed values with `|w| < alpha·σ_full`.
//!
//! A tensor dominated by near-zero entries shows up as a single spike
//! (`Line`), a spike on a low plateau (`InvertedT`), a peaked bell (`Sharp`)
//! or an ordinary bell (`Gaussian`).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moments::{count_where, summarize_detailed, FilterSpec, StatsError};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("no separating threshold for {boundary}: {detail}")]
    Inseparable { boundary: &'static str, detail: String },
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("thresholds file {path}: {reason}")]
    Config { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeClass {
    Gaussian,
    Sharp,
    InvertedT,
    Line,
    Unknown,
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeClass::Gaussian => "Gaussian",
            ShapeClass::Sharp => "Sharp",
            ShapeClass::InvertedT => "InvertedT",
            ShapeClass::Line => "Line",
            ShapeClass::Unknown => "Unknown",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeFeatures {
    pub kurt3s: f64,
    pub center_mass: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierThresholds {
    pub line_min_center_mass: f64,
    pub invt_min_center_mass: f64,
    pub sharp_min_kurt: f64,
    pub gaussian_kurt_band: (f64, f64),
}

impl Default for ClassifierThresholds {
    fn default() -> Self {
        ClassifierThresholds {
            line_min_center_mass: 0.90,
            invt_min_center_mass: 0.40,
            sharp_min_kurt: 3.5,
            gaussian_kurt_band: (2.5, 3.5),
        }
    }
}

impl ClassifierThresholds {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        let t = self;
        let all = [
            t.line_min_center_mass,
            t.invt_min_center_mass,
            t.sharp_min_kurt,
            t.gaussian_kurt_band.0,
            t.gaussian_kurt_band.1,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(ClassifyError::InvalidThresholds("non-finite value".into()));
        }
        if !(t.line_min_center_mass > t.invt_min_center_mass) {
            return Err(ClassifyError::InvalidThresholds(
                "line_min_center_mass must exceed invt_min_center_mass".into(),
            ));
        }
        if !(t.gaussian_kurt_band.0 < t.sharp_min_kurt) {
            return Err(ClassifyError::InvalidThresholds(
                "gaussian_kurt_band.lo must be below sharp_min_kurt".into(),
            ));
        }
        if !(t.gaussian_kurt_band.0 <= t.gaussian_kurt_band.1) {
            return Err(ClassifyError::InvalidThresholds("gaussian_kurt_band is reversed".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClassifyError> {
        let path = path.as_ref();
        let config = |reason: String| ClassifyError::Config {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| config(e.to_string()))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| config(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClassifyError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("thresholds serialize");
        std::fs::write(path, text + "\n").map_err(|e| ClassifyError::Config {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Features of the finite entries of `values`.
pub fn extract_features(values: &[f64], alpha: f64) -> Result<ShapeFeatures, ClassifyError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(ClassifyError::InvalidThresholds(format!("alpha must be > 0, got {alpha}")));
    }
    let detailed = summarize_detailed(values, Some(&FilterSpec::sigma(3.0)))?;
    let sigma_full = detailed.full.std();
    if !(sigma_full > 0.0) {
        return Err(ClassifyError::DegenerateSample("zero standard deviation".into()));
    }
    let kurt3s = detailed
        .summary
        .kurtosis
        .ok_or_else(|| ClassifyError::DegenerateSample("windowed sample is constant".into()))?;
    let (lo, hi) = detailed.window.expect("sigma filter set");
    let band = alpha * sigma_full;
    let central = count_where(values, |x| x.is_finite() && x >= lo && x <= hi && x.abs() < band);
    Ok(ShapeFeatures {
        kurt3s,
        center_mass: central as f64 / detailed.filtered.count as f64,
        alpha,
    })
}

/// Decision ladder; the first matching rule wins.
pub fn classify(features: &ShapeFeatures, t: &ClassifierThresholds) -> ShapeClass {
    let (lo, hi) = t.gaussian_kurt_band;
    if features.center_mass >= t.line_min_center_mass {
        ShapeClass::Line
    } else if features.center_mass >= t.invt_min_center_mass {
        ShapeClass::InvertedT
    } else if features.kurt3s >= t.sharp_min_kurt {
        ShapeClass::Sharp
    } else if features.kurt3s >= lo && features.kurt3s <= hi {
        ShapeClass::Gaussian
    } else {
        ShapeClass::Unknown
    }
}

/// A labelled calibration point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub noise_sigma: f64,
    pub features: ShapeFeatures,
    pub expected: ShapeClass,
}

/// Midpoint threshold between `upper` (values that must clear it) and
/// `lower` (values that must not).
fn separate(
    boundary: &'static str,
    upper: &[&SweepPoint],
    lower: &[&SweepPoint],
    key: impl Fn(&SweepPoint) -> f64,
) -> Result<f64, ClassifyError> {
    let describe = |p: &SweepPoint| format!("σ={} ({})", p.noise_sigma, p.expected);
    if upper.is_empty() || lower.is_empty() {
        return Err(ClassifyError::Inseparable {
            boundary,
            detail: "sweep lacks points on one side of the boundary".into(),
        });
    }
    let min_up = upper
        .iter()
        .min_by(|a, b| key(a).total_cmp(&key(b)))
        .unwrap();
    let max_low = lower
        .iter()
        .max_by(|a, b| key(a).total_cmp(&key(b)))
        .unwrap();
    if !(key(min_up) > key(max_low)) {
        return Err(ClassifyError::Inseparable {
            boundary,
            detail: format!(
                "{} at {} does not exceed {} at {}",
                describe(min_up),
                key(min_up),
                describe(max_low),
                key(max_low)
            ),
        });
    }
    Ok(0.5 * (key(min_up) + key(max_low)))
}

/// Thresholds placed at midpoints between adjacent regimes of a labelled
/// sweep. Every regime must be present and separable.
pub fn calibrate_thresholds(sweep: &[SweepPoint]) -> Result<ClassifierThresholds, ClassifyError> {
    let of = |classes: &[ShapeClass]| -> Vec<&SweepPoint> {
        sweep.iter().filter(|p| classes.contains(&p.expected)).collect()
    };
    use ShapeClass::*;
    let cm = |p: &SweepPoint| p.features.center_mass;
    let kurt = |p: &SweepPoint| p.features.kurt3s;

    let line = separate("Line/center_mass", &of(&[Line]), &of(&[InvertedT, Sharp, Gaussian]), cm)?;
    let invt = separate("InvertedT/center_mass", &of(&[InvertedT]), &of(&[Sharp, Gaussian]), cm)?;
    let gaussian = of(&[Gaussian]);
    let sharp = separate("Sharp/kurt3s", &of(&[Sharp]), &gaussian, kurt)?;
    let max_gauss = gaussian.iter().map(|p| kurt(p)).fold(f64::MIN, f64::max);
    let min_gauss = gaussian.iter().map(|p| kurt(p)).fold(f64::MAX, f64::min);
    let margin = sharp - max_gauss;
    let thresholds = ClassifierThresholds {
        line_min_center_mass: line,
        invt_min_center_mass: invt,
        sharp_min_kurt: sharp,
        gaussian_kurt_band: (min_gauss - margin, sharp),
    };
    thresholds.validate()?;
    if let Some(p) = sweep.iter().find(|p| classify(&p.features, &thresholds) != p.expected) {
        return Err(ClassifyError::Inseparable {
            boundary: "verification",
            detail: format!("σ={} expected {} after calibration", p.noise_sigma, p.expected),
        });
    }
    Ok(thresholds)
}
