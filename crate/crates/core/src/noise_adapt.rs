//! Scalar noise adaptation at toy scale.
//!
//! A fixed standard-normal matrix `ΔW` is scaled by a learned scalar:
//! `W' = W + s·ΔW`. The LoRA variant reuses the pre-trained matrix as the
//! direction, `W' = (s + 1)·W + A·B`, with `s` and `B` starting at zero.
//!
//! The toy task is noiseless teacher-student regression with squared loss
//! `L = ½‖W'X − Y‖²_F`. For the scalar problem the loss is a quadratic in
//! `s` with curvature `‖ΔW·X‖²_F`, which gives both a closed-form minimizer
//! and the step-size bound `1/‖ΔW·X‖²_F`.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moments::Moments;
use crate::rng::{self, domain};

#[derive(Debug, Error, PartialEq)]
pub enum AdaptError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate design: ‖ΔW·X‖ is zero")]
    DegenerateDesign,
    #[error("invalid toy task: {0}")]
    InvalidSpec(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("layer keys differ: {0}")]
    KeyMismatch(String),
    #[error("need at least 3 layers after exclusion, have {0}")]
    TooFewLayers(usize),
}

pub type Result<T, E = AdaptError> = std::result::Result<T, E>;

/// Seeded i.i.d. N(0, 1) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDelta {
    pub seed: u64,
    pub values: Array2<f64>,
}

pub fn make_delta(rows: usize, cols: usize, seed: u64) -> NoiseDelta {
    let data = rng::normal_vec(rows * cols, 0.0, 1.0, seed, domain::DELTA);
    NoiseDelta {
        seed,
        values: Array2::from_shape_vec((rows, cols), data).expect("rows*cols elements"),
    }
}

fn same_shape(what: &str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(AdaptError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `W + s·ΔW`.
pub fn apply_scaled_noise(w: &Array2<f64>, delta: &NoiseDelta, s: f64) -> Result<Array2<f64>> {
    same_shape("W vs ΔW", w, &delta.values)?;
    Ok(w + &(&delta.values * s))
}

/// `(s + 1)·W + A·B`.
pub fn apply_lora_ours(w: &Array2<f64>, s: f64, a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = w.dim();
    if a.nrows() != rows || b.ncols() != cols || a.ncols() != b.nrows() {
        return Err(AdaptError::ShapeMismatch(format!(
            "W {:?}, A {:?}, B {:?}",
            w.dim(),
            a.dim(),
            b.dim()
        )));
    }
    Ok(w * (s + 1.0) + &a.dot(b))
}

/// `∂L/∂s = ⟨G, ΔW⟩_F` for upstream gradient `G = ∂L/∂W'`.
pub fn grad_s(upstream: &Array2<f64>, delta: &NoiseDelta) -> Result<f64> {
    same_shape("G vs ΔW", upstream, &delta.values)?;
    Ok(frobenius_dot(upstream, &delta.values))
}

fn frobenius_dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn half_sq_norm(a: &Array2<f64>) -> f64 {
    0.5 * frobenius_dot(a, a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub rank: usize,
    pub n_samples: usize,
    pub sigma_true: f64,
    /// Seed of W, X and the LoRA teacher.
    pub seed: u64,
    /// Seed of ΔW.
    pub delta_seed: u64,
    pub learn_lora: bool,
    /// Absolute step size; `None` uses half the scalar convexity bound.
    /// Values above the bound are clamped to it.
    pub learning_rate: Option<f64>,
    pub max_steps: usize,
    pub tol: f64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            in_dim: 16,
            out_dim: 12,
            rank: 2,
            n_samples: 64,
            sigma_true: 0.3,
            seed: 0,
            delta_seed: 1,
            learn_lora: false,
            learning_rate: None,
            max_steps: 500,
            tol: 1e-3,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AdaptError::InvalidSpec(m.into()));
        if self.in_dim == 0 || self.out_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.learn_lora && (self.rank == 0 || self.rank > self.in_dim.min(self.out_dim)) {
            return bad("rank must lie in 1..=min(in_dim, out_dim)");
        }
        if self.n_samples < self.in_dim {
            return bad("n_samples must be >= in_dim");
        }
        if !(self.sigma_true >= 0.0 && self.sigma_true.is_finite()) {
            return bad("sigma_true must be finite and >= 0");
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning_rate must be > 0");
            }
        }
        if !(self.tol > 0.0) {
            return bad("tol must be > 0");
        }
        Ok(())
    }
}

/// Data of a toy task.
#[derive(Debug, Clone)]
pub struct ToyProblem {
    /// Pre-trained weight, out × in.
    pub w: Array2<f64>,
    /// Inputs, in × n_samples.
    pub x: Array2<f64>,
    /// Teacher outputs, out × n_samples.
    pub y: Array2<f64>,
    pub delta: NoiseDelta,
}

fn seeded_matrix(rows: usize, cols: usize, sd: f64, seed: u64, stream: u64) -> Array2<f64> {
    let data = rng::normal_vec(rows * cols, 0.0, sd, rng::stream_key(seed, domain::TOY, stream), domain::TOY);
    Array2::from_shape_vec((rows, cols), data).expect("rows*cols elements")
}

impl ToyProblem {
    /// Scalar task: `Y = (W + sigma_true·ΔW)·X`. LoRA task:
    /// `Y = ((1 + sigma_true)·W + A*·B*)·X` with a rank-`rank` teacher.
    pub fn build(spec: &ToyTaskSpec, delta: NoiseDelta) -> Result<Self> {
        spec.validate()?;
        if delta.values.dim() != (spec.out_dim, spec.in_dim) {
            return Err(AdaptError::ShapeMismatch(format!(
                "ΔW {:?}, task needs {:?}",
                delta.values.dim(),
                (spec.out_dim, spec.in_dim)
            )));
        }
        let w = seeded_matrix(spec.out_dim, spec.in_dim, (1.0 / spec.in_dim as f64).sqrt(), spec.seed, 0);
        let x = seeded_matrix(spec.in_dim, spec.n_samples, 1.0, spec.seed, 1);
        let target = if spec.learn_lora {
            let a = seeded_matrix(spec.out_dim, spec.rank, 0.3, spec.seed, 2);
            let b = seeded_matrix(spec.rank, spec.in_dim, (1.0 / spec.in_dim as f64).sqrt(), spec.seed, 3);
            apply_lora_ours(&w, spec.sigma_true, &a, &b)?
        } else {
            apply_scaled_noise(&w, &delta, spec.sigma_true)?
        };
        let y = target.dot(&x);
        Ok(ToyProblem { w, x, y, delta })
    }
}

/// `argmin_s ‖(W + sΔW)X − Y‖²_F = ⟨ΔW·X, Y − W·X⟩ / ‖ΔW·X‖²`.
pub fn closed_form_s_for(
    w: &Array2<f64>,
    delta: &NoiseDelta,
    x: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<f64> {
    same_shape("W vs ΔW", w, &delta.values)?;
    if w.ncols() != x.nrows() || y.dim() != (w.nrows(), x.ncols()) {
        return Err(AdaptError::ShapeMismatch(format!(
            "W {:?}, X {:?}, Y {:?}",
            w.dim(),
            x.dim(),
            y.dim()
        )));
    }
    let p = delta.values.dot(x);
    let curvature = frobenius_dot(&p, &p);
    if curvature == 0.0 {
        return Err(AdaptError::DegenerateDesign);
    }
    let residual = y - &w.dot(x);
    Ok(frobenius_dot(&p, &residual) / curvature)
}

pub fn closed_form_s(spec: &ToyTaskSpec, delta: &NoiseDelta) -> Result<f64> {
    if spec.learn_lora {
        return Err(AdaptError::InvalidSpec("closed form exists only for the scalar task".into()));
    }
    let p = ToyProblem::build(spec, delta.clone())?;
    closed_form_s_for(&p.w, &p.delta, &p.x, &p.y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptResult {
    pub s_learned: f64,
    pub s_oracle: f64,
    /// Loss before the first step, then after every accepted step.
    pub loss_curve: Vec<f64>,
    pub a_mat: Option<Vec<Vec<f64>>>,
    pub b_mat: Option<Vec<Vec<f64>>>,
    pub converged: bool,
    pub learning_rate: f64,
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Gradient descent on the toy task. `s` starts at zero; in LoRA mode `A`
/// starts from N(0, 2/in_dim) and `B` at zero.
pub fn toy_train(spec: &ToyTaskSpec) -> Result<AdaptResult> {
    spec.validate()?;
    let delta = make_delta(spec.out_dim, spec.in_dim, spec.delta_seed);
    let problem = ToyProblem::build(spec, delta)?;
    if spec.learn_lora {
        train_lora(spec, &problem)
    } else {
        train_scalar(spec, &problem)
    }
}

fn train_scalar(spec: &ToyTaskSpec, p: &ToyProblem) -> Result<AdaptResult> {
    let s_oracle = closed_form_s_for(&p.w, &p.delta, &p.x, &p.y)?;
    let direction = p.delta.values.dot(&p.x);
    let curvature = frobenius_dot(&direction, &direction);
    let bound = 1.0 / curvature;
    let lr = spec.learning_rate.map_or(0.5 * bound, |lr| lr.min(bound));

    let mut s = 0.0;
    let residual_at = |s: f64| apply_scaled_noise(&p.w, &p.delta, s).map(|w1| w1.dot(&p.x) - &p.y);
    let mut residual = residual_at(s)?;
    let mut loss_curve = vec![half_sq_norm(&residual)];
    for step in 0..spec.max_steps {
        let upstream = residual.dot(&p.x.t());
        let step_size = lr * grad_s(&upstream, &p.delta)?;
        s -= step_size;
        residual = residual_at(s)?;
        let loss = half_sq_norm(&residual);
        if !loss.is_finite() {
            return Err(AdaptError::Diverged { step, loss });
        }
        loss_curve.push(loss);
        if step_size.abs() <= 1e-15 * s.abs().max(1.0) {
            break;
        }
    }
    Ok(AdaptResult {
        s_learned: s,
        s_oracle,
        converged: (s - s_oracle).abs() < spec.tol,
        loss_curve,
        a_mat: None,
        b_mat: None,
        learning_rate: lr,
    })
}

fn train_lora(spec: &ToyTaskSpec, p: &ToyProblem) -> Result<AdaptResult> {
    // With 2·rank < min(in, out) the teacher's (1 + sigma_true)·W term cannot
    // be absorbed by a rank-`rank` product, so the optimum has s = sigma_true.
    let s_oracle = spec.sigma_true;
    let mut s = 0.0;
    let mut a = seeded_matrix(spec.out_dim, spec.rank, (2.0 / spec.in_dim as f64).sqrt(), spec.delta_seed, 4);
    let mut b = Array2::<f64>::zeros((spec.rank, spec.in_dim));
    let loss_of = |s: f64, a: &Array2<f64>, b: &Array2<f64>| -> Result<(f64, Array2<f64>)> {
        let r = apply_lora_ours(&p.w, s, a, b)?.dot(&p.x) - &p.y;
        Ok((half_sq_norm(&r), r))
    };
    let x_norm = frobenius_dot(&p.x, &p.x);
    let w_norm = frobenius_dot(&p.w, &p.w);
    let mut lr = spec
        .learning_rate
        .unwrap_or_else(|| 0.5 / (x_norm * (w_norm + frobenius_dot(&a, &a) + 1.0)));

    let (mut loss, mut residual) = loss_of(s, &a, &b)?;
    let mut loss_curve = vec![loss];
    'outer: for step in 0..spec.max_steps {
        let upstream = residual.dot(&p.x.t());
        let gs = frobenius_dot(&upstream, &p.w);
        let ga = upstream.dot(&b.t());
        let gb = a.t().dot(&upstream);
        // Backtracking keeps every accepted step non-increasing.
        for _ in 0..60 {
            let s_try = s - lr * gs;
            let a_try = &a - &(&ga * lr);
            let b_try = &b - &(&gb * lr);
            let (l, r) = loss_of(s_try, &a_try, &b_try)?;
            if !l.is_finite() {
                return Err(AdaptError::Diverged { step, loss: l });
            }
            if l <= loss {
                let improvement = loss - l;
                (s, a, b, loss, residual) = (s_try, a_try, b_try, l, r);
                loss_curve.push(loss);
                lr *= 1.2;
                if improvement <= 1e-15 * loss.max(1e-300) {
                    break 'outer;
                }
                continue 'outer;
            }
            lr *= 0.5;
        }
        break;
    }
    Ok(AdaptResult {
        s_learned: s,
        s_oracle,
        converged: (s - s_oracle).abs() < spec.tol,
        loss_curve,
        a_mat: Some(to_rows(&a)),
        b_mat: Some(to_rows(&b)),
        learning_rate: lr,
    })
}

/// Population std of a delta matrix.
pub fn delta_sigma(values: &[f64]) -> f64 {
    Moments::of(values).map_or(0.0, |m| m.std())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSigmaDiff {
    pub layer: String,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSigmaReport {
    pub per_layer: Vec<LayerSigmaDiff>,
    pub mean_abs_diff: f64,
}

impl DeltaSigmaReport {
    /// Report from precomputed `(layer, σ_a, σ_b)` triples.
    pub fn from_sigmas(layers: impl IntoIterator<Item = (String, f64, f64)>) -> Self {
        let per_layer: Vec<LayerSigmaDiff> = layers
            .into_iter()
            .map(|(layer, sigma_a, sigma_b)| LayerSigmaDiff {
                layer,
                sigma_a,
                sigma_b,
                abs_diff: (sigma_a - sigma_b).abs(),
            })
            .collect();
        let mean_abs_diff = if per_layer.is_empty() {
            0.0
        } else {
            per_layer.iter().map(|l| l.abs_diff).sum::<f64>() / per_layer.len() as f64
        };
        DeltaSigmaReport {
            per_layer,
            mean_abs_diff,
        }
    }
}

/// Per-layer `|σ_a − σ_b|` of two sets of deltas with identical keys.
pub fn delta_sigma_report<V: AsRef<[f64]>>(
    deltas_a: &BTreeMap<String, V>,
    deltas_b: &BTreeMap<String, V>,
) -> Result<DeltaSigmaReport> {
    if !deltas_a.keys().eq(deltas_b.keys()) {
        let only_a: Vec<_> = deltas_a.keys().filter(|k| !deltas_b.contains_key(*k)).collect();
        let only_b: Vec<_> = deltas_b.keys().filter(|k| !deltas_a.contains_key(*k)).collect();
        return Err(AdaptError::KeyMismatch(format!("only in a: {only_a:?}; only in b: {only_b:?}")));
    }
    if deltas_a.is_empty() {
        return Err(AdaptError::KeyMismatch("no layers".into()));
    }
    Ok(DeltaSigmaReport::from_sigmas(
        deltas_a
            .iter()
            .zip(deltas_b.values())
            .map(|((layer, a), b)| (layer.clone(), delta_sigma(a.as_ref()), delta_sigma(b.as_ref()))),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthTrend {
    /// Included layers only, ascending index.
    pub per_layer_sigma: Vec<(usize, f64)>,
    pub spearman_rho: f64,
    /// False when the σ values are all tied; `spearman_rho` is then 0.
    pub rho_defined: bool,
    pub exclude_ends: bool,
}

/// Mid-ranks (1-based) with ties averaged.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &i in &order[start..=end] {
            out[i] = rank;
        }
        start = end + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side has no rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation between layer index and delta σ.
pub fn depth_trend<V: AsRef<[f64]>>(deltas: &BTreeMap<usize, V>, exclude_ends: bool) -> Result<DepthTrend> {
    depth_trend_from_sigmas(deltas.iter().map(|(&i, d)| (i, delta_sigma(d.as_ref()))), exclude_ends)
}

/// [`depth_trend`] on precomputed per-layer σ values.
pub fn depth_trend_from_sigmas(
    sigmas: impl IntoIterator<Item = (usize, f64)>,
    exclude_ends: bool,
) -> Result<DepthTrend> {
    let mut layers: Vec<(usize, f64)> = sigmas.into_iter().collect();
    layers.sort_by_key(|(i, _)| *i);
    if exclude_ends {
        if layers.len() <= 2 {
            return Err(AdaptError::TooFewLayers(0));
        }
        layers = layers[1..layers.len() - 1].to_vec();
    }
    if layers.len() < 3 {
        return Err(AdaptError::TooFewLayers(layers.len()));
    }
    let idx: Vec<f64> = layers.iter().map(|(i, _)| *i as f64).collect();
    let sig: Vec<f64> = layers.iter().map(|(_, s)| *s).collect();
    let rho = spearman(&idx, &sig);
    Ok(DepthTrend {
        per_layer_sigma: layers,
        spearman_rho: rho.unwrap_or(0.0),
        rho_defined: rho.is_some(),
        exclude_ends,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn delta_statistics_and_determinism() {
        let d = make_delta(1000, 1000, 5);
        let m = Moments::of(d.values.as_slice().unwrap()).unwrap();
        assert!(m.mean.abs() < 0.004);
        assert!((m.std() - 1.0).abs() < 0.005);
        assert_eq!(make_delta(20, 30, 5).values, make_delta(20, 30, 5).values);
        assert_ne!(make_delta(20, 30, 5).values, make_delta(20, 30, 6).values);
    }

    #[test]
    fn scaled_noise() {
        let w = array![[1.0, 2.0], [3.0, 4.0]];
        let d = make_delta(2, 2, 1);
        assert_eq!(apply_scaled_noise(&w, &d, 0.0).unwrap(), w);
        assert!(apply_scaled_noise(&w, &make_delta(3, 2, 1), 1.0).is_err());

        let zero = Array2::zeros((1000, 1000));
        let big = make_delta(1000, 1000, 2);
        let out = apply_scaled_noise(&zero, &big, 0.25).unwrap();
        let std = Moments::of(out.as_slice().unwrap()).unwrap().std();
        assert!((std - 0.25).abs() < 0.25 * 0.005);
    }

    #[test]
    fn noise_compensation_law() {
        let w = seeded_matrix(50, 40, 0.7, 3, 9);
        let d = make_delta(50, 40, 8);
        let sigma_d = delta_sigma(d.values.as_slice().unwrap());
        for s in [0.0, 0.3, -1.7] {
            let diff = apply_scaled_noise(&w, &d, s).unwrap() - &w;
            let got = delta_sigma(diff.as_slice().unwrap());
            assert!((got - s.abs() * sigma_d).abs() < 1e-12, "s={s}");
        }
    }

    #[test]
    fn lora_update() {
        let w = array![[1.0, -2.0], [0.5, 3.0]];
        let a = array![[1.0], [2.0]];
        let b0 = Array2::zeros((1, 2));
        assert_eq!(apply_lora_ours(&w, 0.0, &a, &b0).unwrap(), w);
        // s = −1 removes W, leaving A·B = I·W.
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(apply_lora_ours(&w, -1.0, &a, &w).unwrap(), w);
        assert!(apply_lora_ours(&w, 0.0, &array![[1.0]], &b0).is_err());
    }

    #[test]
    fn variance_adds() {
        let w = seeded_matrix(1000, 1000, 0.4, 11, 0);
        let d = make_delta(1000, 1000, 12);
        let s = 0.3;
        let out = apply_scaled_noise(&w, &d, s).unwrap();
        let got = delta_sigma(out.as_slice().unwrap());
        let expected = (delta_sigma(w.as_slice().unwrap()).powi(2) + s * s).sqrt();
        assert!((got / expected - 1.0).abs() < 0.01);
    }

    #[test]
    fn lora_matches_naive_product() {
        let w = seeded_matrix(3, 3, 1.0, 1, 0);
        let a = seeded_matrix(3, 1, 1.0, 1, 1);
        let b = seeded_matrix(1, 3, 1.0, 1, 2);
        let s = 0.37;
        let got = apply_lora_ours(&w, s, &a, &b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut ab = 0.0;
                for k in 0..1 {
                    ab += a[[i, k]] * b[[k, j]];
                }
                assert!((got[[i, j]] - ((s + 1.0) * w[[i, j]] + ab)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_s_identities() {
        let d = make_delta(4, 3, 2);
        let norm2 = frobenius_dot(&d.values, &d.values);
        assert_eq!(grad_s(&d.values, &d).unwrap(), norm2);
        assert_eq!(grad_s(&Array2::zeros((4, 3)), &d).unwrap(), 0.0);
        assert!(grad_s(&Array2::zeros((3, 3)), &d).is_err());
    }

    #[test]
    fn closed_form_recovers_sigma() {
        for sigma in [0.0, 0.3] {
            let spec = ToyTaskSpec {
                sigma_true: sigma,
                ..Default::default()
            };
            let d = make_delta(spec.out_dim, spec.in_dim, 3);
            assert!((closed_form_s(&spec, &d).unwrap() - sigma).abs() < 1e-10);
        }
        let d = make_delta(2, 2, 1);
        let zero_x = Array2::zeros((2, 5));
        assert_eq!(
            closed_form_s_for(&Array2::zeros((2, 2)), &d, &zero_x, &Array2::zeros((2, 5))),
            Err(AdaptError::DegenerateDesign)
        );
    }

    #[test]
    fn scalar_training() {
        let spec = ToyTaskSpec::default();
        let r = toy_train(&spec).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.s_learned - r.s_oracle).abs() < 1e-3);
        for w in r.loss_curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0));
        }
        // Oversized step requests are clamped to the convexity bound.
        let r2 = toy_train(&ToyTaskSpec {
            learning_rate: Some(1e9),
            ..spec.clone()
        })
        .unwrap();
        assert!(r2.learning_rate < 1e9 && r2.converged);
        assert!(toy_train(&ToyTaskSpec {
            n_samples: 3,
            ..spec
        })
        .is_err());
    }

    #[test]
    fn lora_training_decreases_loss() {
        let spec = ToyTaskSpec {
            learn_lora: true,
            in_dim: 12,
            out_dim: 10,
            rank: 2,
            n_samples: 48,
            max_steps: 3000,
            ..Default::default()
        };
        let r = toy_train(&spec).unwrap();
        assert!(r.a_mat.is_some() && r.b_mat.is_some());
        for w in r.loss_curve.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(*r.loss_curve.last().unwrap() < 1e-3 * r.loss_curve[0], "{:?}", r.loss_curve.last());
        assert!((r.s_learned - spec.sigma_true).abs() < 0.05, "{}", r.s_learned);
    }

    #[test]
    fn sigma_report() {
        let a: BTreeMap<String, Vec<f64>> =
            [("l0".to_string(), vec![1.0, -1.0, 2.0]), ("l1".to_string(), vec![0.5, 0.0, -0.5])].into();
        let r = delta_sigma_report(&a, &a).unwrap();
        assert_eq!(r.mean_abs_diff, 0.0);
        let c = 2.5;
        let b: BTreeMap<String, Vec<f64>> = a.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| x * c).collect())).collect();
        let r = delta_sigma_report(&a, &b).unwrap();
        for l in &r.per_layer {
            assert!((l.abs_diff - (c - 1.0) * l.sigma_a).abs() < 1e-12);
        }
        let mut missing = a.clone();
        missing.remove("l1");
        assert!(matches!(delta_sigma_report(&a, &missing), Err(AdaptError::KeyMismatch(_))));
    }

    #[test]
    fn depth_trend_cases() {
        let ladder: BTreeMap<usize, Vec<f64>> = (0..6).map(|i| (i, vec![-(i as f64 + 1.0), i as f64 + 1.0])).collect();
        let t = depth_trend(&ladder, false).unwrap();
        assert_eq!((t.spearman_rho, t.rho_defined), (1.0, true));
        let flat: BTreeMap<usize, Vec<f64>> = (0..5).map(|i| (i, vec![-1.0, 1.0])).collect();
        let t = depth_trend(&flat, false).unwrap();
        assert_eq!((t.spearman_rho, t.rho_defined), (0.0, false));
        let t = depth_trend(&ladder, true).unwrap();
        assert_eq!(t.per_layer_sigma.first().unwrap().0, 1);
        assert_eq!(t.per_layer_sigma.len(), 4);
        let short: BTreeMap<usize, Vec<f64>> = (0..4).map(|i| (i, vec![0.0, i as f64])).collect();
        assert!(matches!(depth_trend(&short, true), Err(AdaptError::TooFewLayers(2))));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    }
}
