//! Fully connected layer, global average pooling, and classification loss.

use super::{join, Mode, ParamSlot, Params, Scalar};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

pub struct Linear<S: Scalar> {
    pub weight: Array2<S>, // (out, in)
    pub bias: Array1<S>,
    pub grad_weight: Array2<S>,
    pub grad_bias: Array1<S>,
    x: Option<Array2<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: super::he_normal((out_f, in_f), in_f, 0.0, rng),
            bias: Array1::zeros(out_f),
            grad_weight: Array2::zeros((out_f, in_f)),
            grad_bias: Array1::zeros(out_f),
            x: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<S>, mode: Mode) -> Array2<S> {
        let (n, _) = x.dim();
        let (out_f, _) = self.weight.dim();
        let mut y = Array2::<S>::zeros((n, out_f));
        general_mat_mul(S::one(), x, &self.weight.t(), S::zero(), &mut y);
        y += &self.bias;
        if mode == Mode::Train {
            self.x = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Array2<S>) -> Array2<S> {
        let x = self.x.take().expect("linear backward without forward");
        general_mat_mul(S::one(), &gy.t(), &x, S::one(), &mut self.grad_weight);
        self.grad_bias += &gy.sum_axis(Axis(0));
        let mut gx = Array2::<S>::zeros(x.dim());
        general_mat_mul(S::one(), gy, &self.weight, S::zero(), &mut gx);
        gx
    }
}

impl<S: Scalar> Params<S> for Linear<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>)) {
        f(ParamSlot {
            name: join(prefix, "weight"),
            dims: self.weight.shape().to_vec(),
            value: self.weight.as_slice_mut().unwrap(),
            grad: self.grad_weight.as_slice_mut().unwrap(),
        });
        f(ParamSlot {
            name: join(prefix, "bias"),
            dims: self.bias.shape().to_vec(),
            value: self.bias.as_slice_mut().unwrap(),
            grad: self.grad_bias.as_slice_mut().unwrap(),
        });
    }
}

/// Spatial mean over `(h, w)`: `(n, c, h, w)` -> `(n, c)`.
pub struct GlobalAvgPool {
    hw: (usize, usize),
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { hw: (0, 0) }
    }

    pub fn forward<S: Scalar>(&mut self, x: &Array4<S>) -> Array2<S> {
        let (_, _, h, w) = x.dim();
        self.hw = (h, w);
        let scale = S::one() / S::from_f64((h * w) as f64);
        x.sum_axis(Axis(3)).sum_axis(Axis(2)) * scale
    }

    pub fn backward<S: Scalar>(&self, gy: &Array2<S>) -> Array4<S> {
        let (n, c) = gy.dim();
        let (h, w) = self.hw;
        let scale = S::one() / S::from_f64((h * w) as f64);
        let mut gx = Array4::<S>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = gy[[ni, ci]] * scale;
                gx.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .fill(g);
            }
        }
        gx
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean softmax cross-entropy over a batch of logits, with its logit
/// gradient `(softmax - onehot) / n`. Uses the log-sum-exp trick.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Array2<S>,
    targets: &[usize],
) -> (f64, Array2<S>) {
    let (n, k) = logits.dim();
    assert_eq!(n, targets.len(), "one target per row");
    let mut grad = Array2::<S>::zeros((n, k));
    let mut loss = 0.0;
    let inv_n = S::one() / S::from_f64(n as f64);
    for (i, (row, &t)) in logits.outer_iter().zip(targets).enumerate() {
        assert!(t < k, "target class out of range");
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for &z in row.iter() {
            denom = denom + (z - max).exp();
        }
        let lse = max + denom.ln();
        loss += (lse - row[t]).to_f64();
        for (j, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            let delta = if j == t { S::one() } else { S::zero() };
            grad[[i, j]] = (p - delta) * inv_n;
        }
    }
    (loss / n as f64, grad)
}
