use rand::Rng;

use super::Tensor;

/// Uniform in `±sqrt(6 / fan_in)`, suited to layers feeding an ELU.
pub fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    uniform(shape, limit, rng)
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, limit, rng)
}

fn uniform<R: Rng>(shape: &[usize], limit: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}
