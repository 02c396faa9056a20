//! Deterministic, counter-based random streams.
//!
//! Every random draw in the crate is keyed by an explicit (seed, stream)
//! pair, so reruns are bit-identical and independent draws never share
//! state across steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Mixes a seed with a stream label into a fresh generator key
/// (splitmix64-style finalizer).
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for the given (seed, stream) key.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream_id))
}

/// Generator keyed by a string label (parameter init by name).
pub fn named_stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    stream(seed, h)
}

/// Standard-normal tensor.
pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>) -> Tensor {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_parts(shape, data)
}

/// Uniform tensor on [lo, hi).
pub fn uniform_tensor(
    rng: &mut ChaCha8Rng,
    shape: impl Into<Vec<usize>>,
    lo: f64,
    hi: f64,
) -> Tensor {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_parts(shape, data)
}
