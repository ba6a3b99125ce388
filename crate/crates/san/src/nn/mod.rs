//! Minimal CPU neural-network kernels: GEMM-backed convolutions, batch and
//! instance normalization, activations, a linear head and Adam.
//!
//! Every layer owns its parameters and gradient buffers and exposes an
//! explicit `forward` / `backward` pair. Forward passes cache whatever the
//! backward pass needs when run in [`Mode::Train`]; [`Mode::Eval`] passes are
//! pure functions of the parameters. Parameters are reached uniformly through
//! [`ParamSlot`] visitors, which is what the optimizer, the checkpoint
//! container and the finite-difference checks all build on.

mod act;
mod adam;
mod block;
mod conv;
mod init;
mod linear;
mod norm;

pub use act::{sigmoid, sigmoid_backward, tanh, tanh_backward, LeakyRelu};
pub use adam::{Adam, Moments};
pub use block::{ConvBlock, DeconvBlock};
pub use conv::{col2im, im2col, Conv2d, ConvTranspose2d};
pub use init::he_normal;
pub use linear::{softmax_cross_entropy, GlobalAvgPool, Linear};
pub use norm::{Norm2d, NormKind};

use ndarray::NdFloat;

/// Element type the kernels are generic over; implemented for `f32`/`f64`.
///
/// Training runs in `f32`; the finite-difference gradient checks instantiate
/// the same code in `f64`.
pub trait Scalar: NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Forward-pass mode. `Train` caches activations for backward and lets
/// normalization use batch statistics; `Eval` is cache-free and pure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mutable view of one trainable parameter tensor and its gradient.
pub struct ParamSlot<'a, S> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: &'a mut [S],
    pub grad: &'a mut [S],
}

/// Mutable view of one non-trainable state tensor (e.g. running statistics).
pub struct BufSlot<'a, S> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: &'a mut [S],
}

/// Uniform access to a model's parameters and state buffers.
pub trait Params<S: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>));

    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(BufSlot<'_, S>)) {}

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |slot| slot.grad.fill(S::zero()));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |slot| n += slot.value.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
