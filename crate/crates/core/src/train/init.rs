use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples a `[fan_out, fan_in]` weight matrix uniformly in `[-a, a]`.
pub fn xavier_init<T: Scalar, R: Rng + ?Sized>(shape: [usize; 2], rng: &mut R) -> Result<Tensor<T>> {
    let [fan_out, fan_in] = shape;
    xavier_uniform(&[fan_out, fan_in], fan_in, fan_out, rng)
}

/// Xavier-uniform tensor of any shape with explicit fans (conv kernels use
/// `fan = channels * kh * kw`).
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in + fan_out == 0 {
        return Err(Error::InvalidShape("xavier init needs nonzero fans".into()));
    }
    let a = xavier_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let values = (0..n).map(|_| T::of(rng.random_range(-a..=a))).collect();
    Tensor::new(shape, values)
}
