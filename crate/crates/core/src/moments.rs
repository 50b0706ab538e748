//! Distribution statistics over weight tensors.
//!
//! All moments use the population convention (divide by N). Computation is
//! two-pass: a compensated sum for the mean, then compensated sums of the
//! 2nd..4th powers of deviations. Buffers are reduced in fixed-size chunks
//! whose partial sums are combined in chunk order, so the result does not
//! depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::CHUNK;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no finite values to summarize")]
    EmptyInput,
    #[error("no values left after filtering ({before} before the filter)")]
    EmptyAfterFilter { before: u64 },
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("invalid histogram request: {0}")]
    InvalidHistogram(String),
}

/// Reference point of a symmetric window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Center {
    Zero,
    #[default]
    SampleMean,
}

impl Center {
    fn resolve(self, mean: f64) -> f64 {
        match self {
            Center::Zero => 0.0,
            Center::SampleMean => mean,
        }
    }
}

/// Which elements enter the reported moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    /// Keep values within `center ± sigma_k·σ` of the full finite sample.
    pub sigma_k: Option<f64>,
    /// Additionally drop values with `|w| < magnitude_min`.
    pub magnitude_min: Option<f64>,
    pub center: Center,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec::sigma(3.0)
    }
}

impl FilterSpec {
    pub fn none() -> Self {
        FilterSpec {
            sigma_k: None,
            magnitude_min: None,
            center: Center::SampleMean,
        }
    }

    pub fn sigma(k: f64) -> Self {
        FilterSpec {
            sigma_k: Some(k),
            magnitude_min: None,
            center: Center::SampleMean,
        }
    }

    pub fn with_magnitude_min(mut self, m: f64) -> Self {
        self.magnitude_min = Some(m);
        self
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if let Some(k) = self.sigma_k {
            if !(k > 0.0 && k.is_finite()) {
                return Err(StatsError::InvalidFilter(format!("sigma_k must be > 0, got {k}")));
            }
        }
        if let Some(m) = self.magnitude_min {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(StatsError::InvalidFilter(format!(
                    "magnitude_min must be >= 0, got {m}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-tensor distribution statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub count: u64,
    pub mean: f64,
    pub std: f64,
    /// `None` when the final sample is degenerate (fewer than two distinct values).
    pub skewness: Option<f64>,
    /// Non-excess kurtosis (Gaussian = 3). `None` when degenerate.
    pub kurtosis: Option<f64>,
    pub retain_ratio: f64,
    /// 0 when no magnitude threshold is configured.
    pub small_frac: f64,
    pub nonfinite_count: u64,
}

impl StatsSummary {
    pub const CSV_FIELDS: [&'static str; 8] = [
        "count",
        "mean",
        "std",
        "skewness",
        "kurtosis",
        "retain_ratio",
        "small_frac",
        "nonfinite_count",
    ];

    /// Field values in [`Self::CSV_FIELDS`] order; undefined moments are empty.
    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        vec![
            self.count.to_string(),
            self.mean.to_string(),
            self.std.to_string(),
            opt(self.skewness),
            opt(self.kurtosis),
            self.retain_ratio.to_string(),
            self.small_frac.to_string(),
            self.nonfinite_count.to_string(),
        ]
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn merge(&mut self, other: CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of a slice, chunked deterministically.
pub fn compensated_sum(values: &[f64]) -> f64 {
    values
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut s = CompensatedSum::default();
            chunk.iter().for_each(|&x| s.add(x));
            s
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(CompensatedSum::default(), |mut acc, s| {
            acc.merge(s);
            acc
        })
        .value()
}

/// Count, mean and central moment sums of a sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    /// Σ (x − mean)^k for k = 2, 3, 4.
    pub sum2: f64,
    pub sum3: f64,
    pub sum4: f64,
}

impl Moments {
    /// Moments of the elements of `values` accepted by `keep`.
    /// `None` when nothing is accepted.
    pub fn of_filtered<F>(values: &[f64], keep: F) -> Option<Self>
    where
        F: Fn(f64) -> bool + Sync,
    {
        let partials: Vec<(u64, CompensatedSum)> = values
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut s = CompensatedSum::default();
                let mut n = 0u64;
                for &x in chunk {
                    if keep(x) {
                        s.add(x);
                        n += 1;
                    }
                }
                (n, s)
            })
            .collect();
        let mut total = CompensatedSum::default();
        let mut count = 0u64;
        for (n, s) in partials {
            count += n;
            total.merge(s);
        }
        if count == 0 {
            return None;
        }
        let mean = total.value() / count as f64;

        let partials: Vec<[CompensatedSum; 3]> = values
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = [CompensatedSum::default(); 3];
                for &x in chunk {
                    if keep(x) {
                        let d = x - mean;
                        let d2 = d * d;
                        acc[0].add(d2);
                        acc[1].add(d2 * d);
                        acc[2].add(d2 * d2);
                    }
                }
                acc
            })
            .collect();
        let mut acc = [CompensatedSum::default(); 3];
        for p in partials {
            for (a, b) in acc.iter_mut().zip(p) {
                a.merge(b);
            }
        }
        Some(Moments {
            count,
            mean,
            sum2: acc[0].value(),
            sum3: acc[1].value(),
            sum4: acc[2].value(),
        })
    }

    pub fn of(values: &[f64]) -> Option<Self> {
        Self::of_filtered(values, |x| x.is_finite())
    }

    pub fn variance(&self) -> f64 {
        (self.sum2 / self.count as f64).max(0.0)
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    fn is_degenerate(&self) -> bool {
        !(self.sum2 > 0.0)
    }

    pub fn skewness(&self) -> Option<f64> {
        if self.is_degenerate() {
            return None;
        }
        let n = self.count as f64;
        let m2 = self.sum2 / n;
        Some((self.sum3 / n) / (m2 * m2.sqrt()))
    }

    pub fn kurtosis(&self) -> Option<f64> {
        if self.is_degenerate() {
            return None;
        }
        let n = self.count as f64;
        let m2 = self.sum2 / n;
        Some((self.sum4 / n) / (m2 * m2))
    }

    /// Moments of the union of two disjoint samples.
    pub fn combine(&self, other: &Moments) -> Moments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let mean = self.mean + delta * nb / n;
        let sum2 = self.sum2 + other.sum2 + d2 * na * nb / n;
        let sum3 = self.sum3
            + other.sum3
            + d2 * delta * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.sum2 - nb * self.sum2) / n;
        let sum4 = self.sum4
            + other.sum4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.sum2 + nb * nb * self.sum2) / (n * n)
            + 4.0 * delta * (na * other.sum3 - nb * self.sum3) / n;
        Moments {
            count: self.count + other.count,
            mean,
            sum2,
            sum3,
            sum4,
        }
    }
}

/// Result of [`summarize_detailed`]: the summary plus the moments of the
/// final (filtered) sample and of the full finite sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailedSummary {
    pub summary: StatsSummary,
    pub full: Moments,
    pub filtered: Moments,
    /// Inclusive window applied by the σ filter, if any.
    pub window: Option<(f64, f64)>,
}

/// Summary statistics of the finite entries of `values`.
///
/// With `sigma_k` set, mean and σ of the full finite sample define the window
/// `center ± kσ`; the reported moments are recomputed on the values inside it.
/// With `magnitude_min` set, values with `|w| < magnitude_min` are removed
/// from the windowed sample as well and counted in `small_frac`.
pub fn summarize(values: &[f64], filter: Option<&FilterSpec>) -> Result<StatsSummary, StatsError> {
    summarize_detailed(values, filter).map(|d| d.summary)
}

pub fn summarize_detailed(
    values: &[f64],
    filter: Option<&FilterSpec>,
) -> Result<DetailedSummary, StatsError> {
    let filter = filter.copied().unwrap_or_else(FilterSpec::none);
    filter.validate()?;
    let full = Moments::of(values).ok_or(StatsError::EmptyInput)?;
    let nonfinite_count = values.len() as u64 - full.count;

    let window = filter.sigma_k.map(|k| {
        let c = filter.center.resolve(full.mean);
        let half = k * full.std();
        (c - half, c + half)
    });
    let in_window = move |x: f64| {
        x.is_finite() && window.map_or(true, |(lo, hi)| x >= lo && x <= hi)
    };
    let windowed_count = match window {
        Some(_) => count_where(values, in_window),
        None => full.count,
    };
    if windowed_count == 0 {
        return Err(StatsError::EmptyAfterFilter { before: full.count });
    }
    let retain_ratio = windowed_count as f64 / full.count as f64;

    let (filtered, small_frac) = match filter.magnitude_min {
        Some(m) => {
            let keep = move |x: f64| in_window(x) && x.abs() >= m;
            let moments = Moments::of_filtered(values, keep).ok_or(StatsError::EmptyAfterFilter {
                before: windowed_count,
            })?;
            let small = (windowed_count - moments.count) as f64 / windowed_count as f64;
            (moments, small)
        }
        None if window.is_some() => (Moments::of_filtered(values, in_window).unwrap(), 0.0),
        None => (full, 0.0),
    };

    Ok(DetailedSummary {
        summary: StatsSummary {
            count: filtered.count,
            mean: filtered.mean,
            std: filtered.std(),
            skewness: filtered.skewness(),
            kurtosis: filtered.kurtosis(),
            retain_ratio,
            small_frac,
            nonfinite_count,
        },
        full,
        filtered,
        window,
    })
}

/// Summary of several samples taken as one, fed part by part.
///
/// Every part goes through [`observe`](Self::observe) once, then through
/// [`accumulate`](Self::accumulate) once, so callers can reload large tensors
/// instead of holding them all in memory. The result equals [`summarize`] on
/// the concatenation, up to rounding.
#[derive(Debug, Clone)]
pub struct PooledSummary {
    filter: FilterSpec,
    len: u64,
    full: Moments,
    window: Option<Option<(f64, f64)>>,
    windowed: u64,
    filtered: Moments,
}

impl PooledSummary {
    pub fn new(filter: Option<&FilterSpec>) -> Result<Self, StatsError> {
        let filter = filter.copied().unwrap_or_else(FilterSpec::none);
        filter.validate()?;
        Ok(PooledSummary {
            filter,
            len: 0,
            full: Moments::default(),
            window: None,
            windowed: 0,
            filtered: Moments::default(),
        })
    }

    /// First pass.
    pub fn observe(&mut self, values: &[f64]) {
        assert!(self.window.is_none(), "observe after accumulate");
        self.len += values.len() as u64;
        if let Some(m) = Moments::of(values) {
            self.full = self.full.combine(&m);
        }
    }

    /// Second pass.
    pub fn accumulate(&mut self, values: &[f64]) {
        let (full, filter) = (self.full, self.filter);
        let window = *self.window.get_or_insert_with(|| {
            filter.sigma_k.map(|k| {
                let c = filter.center.resolve(full.mean);
                (c - k * full.std(), c + k * full.std())
            })
        });
        let in_window = move |x: f64| x.is_finite() && window.map_or(true, |(lo, hi)| x >= lo && x <= hi);
        self.windowed += count_where(values, in_window);
        let m = filter.magnitude_min.unwrap_or(0.0);
        let keep = move |x: f64| in_window(x) && x.abs() >= m;
        if let Some(part) = Moments::of_filtered(values, keep) {
            self.filtered = self.filtered.combine(&part);
        }
    }

    pub fn finish(self) -> Result<StatsSummary, StatsError> {
        if self.full.count == 0 {
            return Err(StatsError::EmptyInput);
        }
        if self.windowed == 0 {
            return Err(StatsError::EmptyAfterFilter { before: self.full.count });
        }
        if self.filtered.count == 0 {
            return Err(StatsError::EmptyAfterFilter { before: self.windowed });
        }
        let f = self.filtered;
        Ok(StatsSummary {
            count: f.count,
            mean: f.mean,
            std: f.std(),
            skewness: f.skewness(),
            kurtosis: f.kurtosis(),
            retain_ratio: self.windowed as f64 / self.full.count as f64,
            small_frac: match self.filter.magnitude_min {
                Some(_) => (self.windowed - f.count) as f64 / self.windowed as f64,
                None => 0.0,
            },
            nonfinite_count: self.len - self.full.count,
        })
    }
}

pub(crate) fn count_where<F>(values: &[f64], pred: F) -> u64
where
    F: Fn(f64) -> bool + Sync,
{
    values
        .par_chunks(CHUNK)
        .map(|c| c.iter().filter(|&&x| pred(x)).count() as u64)
        .sum()
}

/// Uniform-width histogram with explicit out-of-range counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// `(bin_center, count)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (f64, u64)> + '_ {
        self.centers().into_iter().zip(self.counts.iter().copied())
    }

    /// Fixed-width text rendering, one line per bin.
    pub fn render_ascii(&self, width: usize) -> String {
        let peak = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let mut out = String::new();
        for (center, count) in self.rows() {
            let bar = (count as f64 / peak as f64 * width as f64).round() as usize;
            out.push_str(&format!("{center:>12.5e} | {:<width$} {count}\n", "#".repeat(bar)));
        }
        out
    }
}

/// Histogram of the finite entries of `values` over `range`, defaulting to
/// `mean ± 4σ`. A value lands in bin `⌊(x − lo)/width⌋`; `x == hi` goes to
/// the last bin.
pub fn histogram(
    values: &[f64],
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<Histogram, StatsError> {
    if bins == 0 {
        return Err(StatsError::InvalidHistogram("bins must be >= 1".into()));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(StatsError::InvalidHistogram(format!(
                    "range ({lo}, {hi}) is not an increasing finite interval"
                )));
            }
            (lo, hi)
        }
        None => {
            let m = Moments::of(values).ok_or(StatsError::EmptyInput)?;
            let s = m.std();
            if s > 0.0 {
                (m.mean - 4.0 * s, m.mean + 4.0 * s)
            } else {
                (m.mean - 0.5, m.mean + 0.5)
            }
        }
    };
    let width = (hi - lo) / bins as f64;
    let mut bin_edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
    bin_edges.push(hi);

    let partials: Vec<(Vec<u64>, u64, u64, u64)> = values
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut counts = vec![0u64; bins];
            let (mut under, mut over, mut finite) = (0u64, 0u64, 0u64);
            for &x in chunk {
                if !x.is_finite() {
                    continue;
                }
                finite += 1;
                if x < lo {
                    under += 1;
                } else if x > hi {
                    over += 1;
                } else {
                    let idx = (((x - lo) / width).floor() as usize).min(bins - 1);
                    counts[idx] += 1;
                }
            }
            (counts, under, over, finite)
        })
        .collect();
    let mut counts = vec![0u64; bins];
    let (mut underflow, mut overflow, mut finite) = (0, 0, 0);
    for (c, u, o, f) in partials {
        counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        underflow += u;
        overflow += o;
        finite += f;
    }
    if finite == 0 {
        return Err(StatsError::EmptyInput);
    }
    Ok(Histogram {
        bin_edges,
        counts,
        underflow,
        overflow,
    })
}

/// Splits the finite entries of `values` into those inside the closed
/// interval `[c − threshold, c + threshold]` and the rest, preserving order.
pub fn outlier_split(values: &[f64], threshold: f64, center: Center) -> (Vec<f64>, Vec<f64>) {
    let c = match center {
        Center::Zero => 0.0,
        Center::SampleMean => Moments::of(values).map_or(0.0, |m| m.mean),
    };
    let (lo, hi) = (c - threshold, c + threshold);
    values
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .partition(|&x| x >= lo && x <= hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_matches_concatenation() {
        let a = crate::rng::normal_vec(5000, 0.0, 1.0, 1, 9);
        let mut b = crate::rng::normal_vec(3000, 0.5, 2.0, 2, 9);
        b[7] = f64::NAN;
        let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
        for filter in [None, Some(FilterSpec::sigma(2.0).with_magnitude_min(0.1))] {
            let mut p = PooledSummary::new(filter.as_ref()).unwrap();
            p.observe(&a);
            p.observe(&b);
            p.accumulate(&a);
            p.accumulate(&b);
            let got = p.finish().unwrap();
            let want = summarize(&joined, filter.as_ref()).unwrap();
            assert_eq!((got.count, got.nonfinite_count), (want.count, want.nonfinite_count));
            assert_eq!(got.retain_ratio, want.retain_ratio);
            assert_eq!(got.small_frac, want.small_frac);
            assert!((got.mean - want.mean).abs() < 1e-12);
            assert!((got.std - want.std).abs() < 1e-12);
            assert!((got.kurtosis.unwrap() - want.kurtosis.unwrap()).abs() < 1e-10);
        }
        assert!(PooledSummary::new(None).unwrap().finish().is_err());
    }
    use crate::rng::{domain, normal_vec};

    #[test]
    fn two_point_law() {
        let v: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let s = summarize(&v, None).unwrap();
        assert_eq!(s.skewness, Some(0.0));
        assert_eq!(s.kurtosis, Some(1.0));
        assert_eq!(s.std, 1.0);
    }

    #[test]
    fn one_to_five() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0], None).unwrap();
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.std, 2f64.sqrt());
        assert_eq!(s.skewness, Some(0.0));
        assert!((s.kurtosis.unwrap() - 1.7).abs() < 1e-15);
        assert_eq!(s.retain_ratio, 1.0);
    }

    #[test]
    fn degenerate_and_empty() {
        let s = summarize(&[2.5; 10], None).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!((s.skewness, s.kurtosis), (None, None));
        let s = summarize(&[7.0], Some(&FilterSpec::default())).unwrap();
        assert_eq!((s.count, s.skewness), (1, None));
        assert_eq!(summarize(&[], None), Err(StatsError::EmptyInput));
        assert_eq!(summarize(&[f64::NAN], None), Err(StatsError::EmptyInput));
        let spec = FilterSpec::none().with_magnitude_min(1.0);
        assert!(matches!(
            summarize(&[0.0, 0.1], Some(&spec)),
            Err(StatsError::EmptyAfterFilter { before: 2 })
        ));
        assert!(summarize(&[1.0], Some(&FilterSpec::sigma(-1.0))).is_err());
    }

    #[test]
    fn nonfinite_values_are_counted_and_excluded() {
        let s = summarize(&[1.0, f64::NAN, 3.0, f64::INFINITY], None).unwrap();
        assert_eq!((s.count, s.nonfinite_count, s.mean), (2, 2, 2.0));
    }

    /// Kurtosis of N(0,1) truncated to [-a, a], by Simpson quadrature.
    fn truncated_normal_kurtosis(a: f64) -> f64 {
        let n = 20_000;
        let h = 2.0 * a / n as f64;
        let (mut z, mut m2, mut m4) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let x = -a + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let pdf = (-0.5 * x * x).exp();
            z += w * pdf;
            m2 += w * pdf * x * x;
            m4 += w * pdf * x.powi(4);
        }
        (m4 / z) / (m2 / z).powi(2)
    }

    #[test]
    fn gaussian_three_sigma() {
        let v = normal_vec(1_000_000, 0.0, 1.0, 11, domain::SAMPLE);
        let raw = summarize(&v, None).unwrap();
        assert!((raw.kurtosis.unwrap() - 3.0).abs() < 0.05);
        let s = summarize(&v, Some(&FilterSpec::sigma(3.0))).unwrap();
        assert!(s.skewness.unwrap().abs() < 0.01);
        // Moments are recomputed inside the window, so the reference is the
        // truncated normal (about 2.83), not 3.
        let reference = truncated_normal_kurtosis(3.0);
        assert!((reference - 2.829).abs() < 1e-3, "{reference}");
        assert!((s.kurtosis.unwrap() - reference).abs() < 0.02, "{s:?}");
        assert!((s.retain_ratio - 0.9973).abs() < 0.001);
    }

    #[test]
    fn magnitude_filter_counts_small_values() {
        let v = [0.0, 0.0, 0.5, -0.5, 1.0, -1.0, 0.0001, 2.0];
        let spec = FilterSpec::none().with_magnitude_min(1e-3);
        let s = summarize(&v, Some(&spec)).unwrap();
        assert_eq!(s.count, 5);
        assert_eq!(s.small_frac, 3.0 / 8.0);
    }

    #[test]
    fn combine_matches_pooled() {
        let a = normal_vec(5000, 1.0, 2.0, 1, domain::SAMPLE);
        let b = normal_vec(3000, -0.5, 0.3, 2, domain::SAMPLE);
        let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
        let direct = Moments::of(&pooled).unwrap();
        let merged = Moments::of(&a).unwrap().combine(&Moments::of(&b).unwrap());
        assert_eq!(merged.count, direct.count);
        assert!((merged.mean - direct.mean).abs() < 1e-12);
        assert!((merged.std() - direct.std()).abs() < 1e-12);
        assert!((merged.skewness().unwrap() - direct.skewness().unwrap()).abs() < 1e-10);
        assert!((merged.kurtosis().unwrap() - direct.kurtosis().unwrap()).abs() < 1e-10);
    }

    #[test]
    fn histogram_boundaries() {
        let h = histogram(&[0.0, 0.5, 1.0], 2, Some((0.0, 1.0))).unwrap();
        assert_eq!(h.counts, vec![1, 2]);
        let h = histogram(&[0.0, 0.25, 1.0], 2, Some((0.0, 1.0))).unwrap();
        assert_eq!(h.counts, vec![2, 1]);
        let h = histogram(&[-0.1, 0.2, 1.5, f64::NAN], 4, Some((0.0, 1.0))).unwrap();
        assert_eq!((h.underflow, h.overflow, h.total()), (1, 1, 3));
        assert_eq!(h.bin_edges.len(), 5);
        assert!(histogram(&[1.0], 0, None).is_err());
        assert!(histogram(&[1.0], 3, Some((1.0, 1.0))).is_err());
        assert!(histogram(&[], 3, None).is_err());
        let h = histogram(&[2.0, 2.0], 3, None).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 2);
    }

    #[test]
    fn histogram_of_gaussian_is_symmetric() {
        let v = normal_vec(100_000, 0.0, 1.0, 5, domain::SAMPLE);
        let h = histogram(&v, 100, Some((-4.0, 4.0))).unwrap();
        let total = v.len() as f64;
        for i in 0..50 {
            let diff = h.counts[i].abs_diff(h.counts[99 - i]) as f64;
            assert!(diff / total < 0.01, "bin {i}");
        }
        assert!(h.render_ascii(40).lines().count() == 100);
    }

    #[test]
    fn outlier_split_cases() {
        assert_eq!(
            outlier_split(&[0.1, 5.0], 0.3, Center::Zero),
            (vec![0.1], vec![5.0])
        );
        let v = [0.0, 1.0, -2.0, 0.0, 3.0];
        assert_eq!(outlier_split(&v, 0.0, Center::Zero).0, vec![0.0, 0.0]);
        let (inr, out) = outlier_split(&v, 3.0, Center::Zero);
        assert_eq!((inr.len(), out.len()), (5, 0));
        let (inr, out) = outlier_split(&[1.0, 2.0, 3.0, 10.0], 2.0, Center::SampleMean);
        assert_eq!((inr, out), (vec![2.0, 3.0], vec![1.0, 10.0]));
    }
}
