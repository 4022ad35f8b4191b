//! Parameter initializers.

use rand::Rng;

use crate::tensor::Tensor;

pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Glorot/Xavier uniform for a `fan_in × fan_out` weight.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], bound)
}
