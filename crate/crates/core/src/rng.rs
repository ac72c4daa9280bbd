//! Seeded randomness.
//!
//! All randomness in the crate comes from [`Generator`], a ChaCha8 stream
//! cipher RNG seeded from a single `u64`. Nothing reads ambient entropy.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type Generator = rand_chacha::ChaCha8Rng;

pub fn generator(seed: u64) -> Generator {
    Generator::seed_from_u64(seed)
}

/// Generator for a sub-stream derived from `seed` and a tag, e.g. the step
/// number, so sampling at step `n` does not depend on earlier draws.
pub fn derived(seed: u64, tag: u64) -> Generator {
    let mut g = Generator::seed_from_u64(seed);
    g.set_stream(tag);
    g
}

/// Uniform in `[-bound, bound)` from a fresh generator.
pub fn uniform(shape: &[usize], bound: f64, seed: u64) -> Tensor {
    uniform_from(shape, bound, &mut generator(seed))
}

pub fn uniform_from(shape: &[usize], bound: f64, rng: &mut Generator) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

pub fn normal_from(shape: &[usize], std: f64, rng: &mut Generator) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Xavier/Glorot uniform for a `fan_in × fan_out` projection.
pub fn xavier_from(fan_in: usize, fan_out: usize, rng: &mut Generator) -> Tensor {
    let bound = crate::math::sqrt(6.0 / (fan_in + fan_out).max(1) as f64);
    uniform_from(&[fan_in, fan_out], bound, rng)
}

/// Test-point draw for a named parameter: layer-norm gains (`*_gain`) in
/// `1 ± bound`, everything else in `±bound`. Gains near zero would collapse
/// normalised rows onto the bias and make finite differences meaningless.
pub fn perturbed_param(name: &str, shape: &[usize], bound: f64, rng: &mut Generator) -> Tensor {
    let t = uniform_from(shape, bound, rng);
    if name.ends_with("_gain") {
        t.map(|x| 1.0 + x)
    } else {
        t
    }
}
