//! Fixtures shared by the kernel benchmarks.

use uniblend::tensor::{Fill, Tensor};
use uniblend::Scalar;

/// Uniform random tensor in `[0, 1)`.
pub fn image<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::create(shape, Fill::Uniform { lo: 0.0, hi: 1.0, seed }).expect("valid shape")
}

/// Uniform random tensor in `[-0.1, 0.1)`, sized like a conv weight.
pub fn weight<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::create(shape, Fill::Uniform { lo: -0.1, hi: 0.1, seed }).expect("valid shape")
}
