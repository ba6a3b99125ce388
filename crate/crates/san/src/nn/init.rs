//! Seeded parameter initialization.

use super::Scalar;
use ndarray::{Array, Dimension, ShapeBuilder};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-style normal init for layers followed by LeakyReLU:
/// `std = sqrt(2 / ((1 + slope^2) * fan_in))`.
///
/// Sampling happens in `f64` so an `f32` and an `f64` model built from the
/// same seed hold numerically matching parameters.
pub fn he_normal<S, D, Sh>(shape: Sh, fan_in: usize, slope: f64, rng: &mut impl Rng) -> Array<S, D>
where
    S: Scalar,
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
{
    let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    let dist = Normal::new(0.0, std).expect("std is finite");
    Array::from_shape_simple_fn(shape, || S::from_f64(dist.sample(rng)))
}
