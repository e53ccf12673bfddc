//! Seeded, counter-based random streams.
//!
//! Every draw is addressed by `(seed, stream, index)` so that any sample can
//! be regenerated independently of how many were drawn before it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

/// Generator for item `index` of stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// `count` standard-normal vectors of length `dim`; vector `i` depends only
/// on `(seed, i)`.
pub fn sample_normal_vectors<T: Scalar>(seed: u64, count: usize, dim: usize) -> Vec<Vec<T>> {
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, 0, i as u64);
            (0..dim).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect()
        })
        .collect()
}

pub fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

pub fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("valid shape")
}
