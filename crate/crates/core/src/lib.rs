//! Weight-distribution forensics for neural-network checkpoints.
//!
//! - [`tensor_io`]: safetensors reading/writing with f16/bf16/f32/f64 decoding.
//! - [`moments`]: mean, σ, skewness, kurtosis, σ-window retain ratio, histograms.
//! - [`shape_classify`]: Gaussian / Sharp / Inverted-T / Line shape regimes.
//! - [`synth`]: sparse truncated-Gaussian-plus-outliers weights under additive noise.
//! - [`merge`]: outlier-aware merging of fine-tuned checkpoints, with average and sum baselines.
//! - [`noise_adapt`]: scalar noise adaptation `W + sΔW` and `(s+1)W + AB` at toy scale.

pub mod merge;
pub mod moments;
pub mod noise_adapt;
pub mod rng;
pub mod shape_classify;
pub mod synth;
pub mod tensor_io;
