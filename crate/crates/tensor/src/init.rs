use rand::Rng;

use crate::tensor::Tensor;

/// Kaiming-uniform initialization for ReLU networks: `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

pub fn zeros(shape: &[usize]) -> Tensor<f32> {
    Tensor::zeros(shape)
}

pub fn ones(shape: &[usize]) -> Tensor<f32> {
    Tensor::full(shape, 1.0)
}
