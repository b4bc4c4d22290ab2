use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-width of the Glorot/Xavier uniform distribution.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `[fan_out, fan_in]` matrix with entries i.i.d. uniform on `[-b, b]`, `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "xavier init needs positive fans, got in={fan_in} out={fan_out}"
        )));
    }
    xavier_uniform(vec![fan_out, fan_in], fan_in, fan_out, rng)
}

/// Arbitrary-shape tensor drawn from the Xavier distribution for the given fans.
/// Convolution kernels use `fan_in = in_ch * kh * kw`, `fan_out = out_ch * kh * kw`.
pub fn xavier_uniform<R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "xavier init needs positive fans, got in={fan_in} out={fan_out}"
        )));
    }
    let b = xavier_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-b..=b)).collect();
    Tensor::new(shape, data)
}
