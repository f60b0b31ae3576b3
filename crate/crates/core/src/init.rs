use dpn_tensor::{Float, Tensor};
use rand::Rng;

/// Glorot-uniform sample for a `fan_in x fan_out` weight.
pub fn glorot<T: Float>(rng: &mut (impl Rng + ?Sized), shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-limit..=limit))).collect();
    Tensor::new(shape, data).expect("shape matches sample count")
}

/// Glorot-uniform for a matrix whose last axis is the output.
pub fn glorot_matrix<T: Float>(rng: &mut (impl Rng + ?Sized), rows: usize, cols: usize) -> Tensor<T> {
    glorot(rng, &[rows, cols], rows, cols)
}

pub fn uniform<T: Float>(rng: &mut (impl Rng + ?Sized), shape: &[usize], limit: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-limit..=limit))).collect();
    Tensor::new(shape, data).expect("shape matches sample count")
}
