//! Weight initialization helpers.

use rand::Rng;

use crate::numerics::array::DenseArray;

/// Uniform(−s, s) with s = 1/√fan_in for a [fan_in, fan_out] weight matrix
/// (inputs are row vectors, multiplied as x·W).
pub fn linear_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> DenseArray {
    let s = 1.0 / (fan_in as f64).sqrt();
    let values = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..s)).collect();
    DenseArray::matrix(fan_in, fan_out, values)
}

pub fn zero_bias(width: usize) -> DenseArray {
    DenseArray::from_vec(vec![0.0; width])
}

pub fn const_bias(width: usize, value: f64) -> DenseArray {
    DenseArray::from_vec(vec![value; width])
}
