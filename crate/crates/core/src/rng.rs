//! Seeded random streams.
//!
//! Every stream is a xoshiro256++ generator seeded through SplitMix64
//! (`seed_from_u64`). Normal deviates come from the ziggurat sampler in
//! `rand_distr::StandardNormal`. Large buffers are filled in fixed-size
//! chunks, each chunk drawing from its own stream keyed by
//! `(seed, domain, chunk index)`, so parallel and serial fills agree.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;

pub type StreamRng = Xoshiro256PlusPlus;

/// Elements per independently seeded chunk.
pub const CHUNK: usize = 1 << 16;

/// Stream domains. Distinct domains never share a sub-stream even under the
/// same user seed.
pub mod domain {
    pub const WSTAR_LAYOUT: u64 = 0x5753_4c59;
    pub const WSTAR_VALUES: u64 = 0x5753_5641;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const DELTA: u64 = 0x444c_5441;
    pub const TOY: u64 = 0x544f_5920;
    pub const SAMPLE: u64 = 0x534d_504c;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Key of the sub-stream `(seed, domain, index)`.
pub fn stream_key(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ domain) ^ index)
}

pub fn stream(seed: u64, domain: u64, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_key(seed, domain, index))
}

/// Fills `buf` with i.i.d. N(0, 1) draws.
pub fn fill_standard_normal(buf: &mut [f64], seed: u64, domain: u64) {
    buf.par_chunks_mut(CHUNK)
        .enumerate()
        .for_each(|(i, chunk)| {
            let mut rng = stream(seed, domain, i as u64);
            for x in chunk {
                *x = rng.sample(StandardNormal);
            }
        });
}

/// `n` i.i.d. N(mean, sd²) draws.
pub fn normal_vec(n: usize, mean: f64, sd: f64, seed: u64, domain: u64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    fill_standard_normal(&mut out, seed, domain);
    if sd != 1.0 || mean != 0.0 {
        out.par_iter_mut().for_each(|x| *x = mean + sd * *x);
    }
    out
}
