//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Array, Scalar};

/// Uniform in `[-bound, bound)`.
pub fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Array<T> {
    Array::from_fn(shape, |_| {
        if bound > 0.0 {
            T::from_f64(rng.gen_range(-bound..bound))
        } else {
            T::zero()
        }
    })
}

/// Zero-mean normal with the given standard deviation.
pub fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Array<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

/// PyTorch-style default for a `[fan_in, fan_out]` weight.
pub fn linear_weight<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array<T> {
    uniform(&[fan_in, fan_out], 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}
