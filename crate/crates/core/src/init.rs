//! Seeded parameter initialisation.
//!
//! Each named parameter draws from its own ChaCha stream keyed by the model
//! seed and a hash of the name, so adding or removing a layer never shifts
//! the values of any other layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ConvParams, Tensor};

/// FNV-1a, stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stable_hash(name));
    rng
}

/// Uniform on `±sqrt(6 / fan_in)`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// He-uniform weights, zero bias. For convolutions followed by the leaky
/// activation.
pub fn he_conv(
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> ConvParams {
    ConvParams {
        weight: he_uniform(&[out_c, in_c, k, k], in_c * k * k, rng),
        bias: Tensor::zeros(&[out_c]),
        stride,
        padding: k / 2,
    }
}

/// Uniform on `±sqrt(3 / fan_in)`, zero bias. For convolutions with no
/// activation after them, so output variance matches input variance.
pub fn linear_conv(
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> ConvParams {
    let mut c = he_conv(out_c, in_c, k, stride, rng);
    c.weight.scale(0.5f64.sqrt());
    c
}
