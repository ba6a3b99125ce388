//! Elementwise activations with cached backward passes.

use super::{Mode, Scalar};
use ndarray::{Array, Dimension};

/// Leaky rectifier. Caches the sign pattern on the training pass.
pub struct LeakyRelu<S> {
    slope: S,
    mask: Option<Vec<bool>>,
}

impl<S: Scalar> LeakyRelu<S> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu {
            slope: S::from_f64(slope),
            mask: None,
        }
    }

    pub fn forward<D: Dimension>(&mut self, x: &Array<S, D>, mode: Mode) -> Array<S, D> {
        let slope = self.slope;
        if mode == Mode::Train {
            self.mask = Some(x.iter().map(|v| *v > S::zero()).collect());
        }
        x.mapv(|v| if v > S::zero() { v } else { v * slope })
    }

    pub fn backward<D: Dimension>(&mut self, gy: &Array<S, D>) -> Array<S, D> {
        let mask = self.mask.take().expect("leaky relu backward without forward");
        assert_eq!(mask.len(), gy.len());
        let slope = self.slope;
        let mut gx = gy.clone();
        for (g, pos) in gx.iter_mut().zip(mask.iter()) {
            if !pos {
                *g = *g * slope;
            }
        }
        gx
    }
}

/// Numerically stable logistic function `1 / (1 + exp(-x))`.
pub fn sigmoid<S: Scalar, D: Dimension>(x: &Array<S, D>) -> Array<S, D> {
    x.mapv(|v| {
        if v >= S::zero() {
            S::one() / (S::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (S::one() + e)
        }
    })
}

/// Input gradient of [`sigmoid`] given its output `y`.
pub fn sigmoid_backward<S: Scalar, D: Dimension>(y: &Array<S, D>, gy: &Array<S, D>) -> Array<S, D> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &yv| *g = *g * yv * (S::one() - yv));
    gx
}

pub fn tanh<S: Scalar, D: Dimension>(x: &Array<S, D>) -> Array<S, D> {
    x.mapv(|v| v.tanh())
}

/// Input gradient of [`tanh`] given its output `y`.
pub fn tanh_backward<S: Scalar, D: Dimension>(y: &Array<S, D>, gy: &Array<S, D>) -> Array<S, D> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &yv| *g = *g * (S::one() - yv * yv));
    gx
}
