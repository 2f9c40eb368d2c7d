use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;
use crate::Scalar;

/// Normal(0, std²) samples redrawn until they fall inside ±2·std.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}
