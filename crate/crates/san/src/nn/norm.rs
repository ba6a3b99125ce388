//! Batch and instance normalization over `(n, c, h, w)` activations.

use super::{join, BufSlot, Mode, ParamSlot, Params, Scalar};
use ndarray::{Array1, Array4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Statistics per channel over the whole batch; running estimates are
    /// kept for evaluation.
    Batch,
    /// Statistics per (sample, channel); evaluation recomputes them, so no
    /// running state is involved.
    Instance,
}

struct Cache<S> {
    xhat: Array4<S>,
    /// One inverse standard deviation per statistics group: `c` entries for
    /// batch mode, `n * c` for instance mode.
    inv_std: Vec<S>,
}

pub struct Norm2d<S: Scalar> {
    pub kind: NormKind,
    eps: S,
    momentum: S,
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub grad_gamma: Array1<S>,
    pub grad_beta: Array1<S>,
    pub running_mean: Array1<S>,
    pub running_var: Array1<S>,
    cache: Option<Cache<S>>,
}

impl<S: Scalar> Norm2d<S> {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        Norm2d {
            kind,
            eps: S::from_f64(1e-5),
            momentum: S::from_f64(0.1),
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, mode: Mode) -> Array4<S> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "norm channels");
        let hw = h * w;
        let xs = x.as_slice().expect("norm input must be standard layout");

        if self.kind == NormKind::Batch && mode == Mode::Eval {
            let mut y = x.clone();
            let ys = y.as_slice_mut().unwrap();
            for ci in 0..c {
                let inv = S::one() / (self.running_var[ci] + self.eps).sqrt();
                let scale = self.gamma[ci] * inv;
                let shift = self.beta[ci] - self.running_mean[ci] * scale;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for v in &mut ys[base..base + hw] {
                        *v = *v * scale + shift;
                    }
                }
            }
            return y;
        }

        let groups: usize = match self.kind {
            NormKind::Batch => c,
            NormKind::Instance => n * c,
        };
        let mut mean = vec![S::zero(); groups];
        let mut inv_std = vec![S::zero(); groups];
        let mut xhat = Array4::<S>::zeros((n, c, h, w));
        let xh = xhat.as_slice_mut().unwrap();

        match self.kind {
            NormKind::Batch => {
                let m = S::from_f64((n * hw) as f64);
                for ci in 0..c {
                    let mut s = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for &v in &xs[base..base + hw] {
                            s = s + v;
                        }
                    }
                    let mu = s / m;
                    let mut s2 = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for &v in &xs[base..base + hw] {
                            let d = v - mu;
                            s2 = s2 + d * d;
                        }
                    }
                    let var = s2 / m;
                    mean[ci] = mu;
                    inv_std[ci] = S::one() / (var + self.eps).sqrt();
                    if mode == Mode::Train {
                        let mom = self.momentum;
                        self.running_mean[ci] =
                            (S::one() - mom) * self.running_mean[ci] + mom * mu;
                        self.running_var[ci] = (S::one() - mom) * self.running_var[ci] + mom * var;
                    }
                }
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let (mu, inv) = (mean[ci], inv_std[ci]);
                        for k in base..base + hw {
                            xh[k] = (xs[k] - mu) * inv;
                        }
                    }
                }
            }
            NormKind::Instance => {
                let m = S::from_f64(hw as f64);
                for g in 0..groups {
                    let base = g * hw;
                    let mut s = S::zero();
                    for &v in &xs[base..base + hw] {
                        s = s + v;
                    }
                    let mu = s / m;
                    let mut s2 = S::zero();
                    for &v in &xs[base..base + hw] {
                        let d = v - mu;
                        s2 = s2 + d * d;
                    }
                    mean[g] = mu;
                    inv_std[g] = S::one() / (s2 / m + self.eps).sqrt();
                    for k in base..base + hw {
                        xh[k] = (xs[k] - mu) * inv_std[g];
                    }
                }
            }
        }

        let mut y = xhat.clone();
        {
            let ys = y.as_slice_mut().unwrap();
            let xh = xhat.as_slice().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let (g, b) = (self.gamma[ci], self.beta[ci]);
                    for k in base..base + hw {
                        ys[k] = xh[k] * g + b;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some(Cache { xhat, inv_std });
        }
        y
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let cache = self.cache.take().expect("norm backward without forward");
        let (n, c, h, w) = gy.dim();
        let hw = h * w;
        let gys = gy.as_slice().expect("grad must be standard layout");
        let xh = cache.xhat.as_slice().unwrap();
        let mut gx = Array4::<S>::zeros((n, c, h, w));
        let gxs = gx.as_slice_mut().unwrap();

        // For each statistics group of size m:
        //   gx = gamma * inv_std * (gy - mean(gy) - xhat * mean(gy * xhat))
        let apply_group = |start: usize,
                           len: usize,
                           scale: S,
                           inv: S,
                           gxs: &mut [S]|
         -> (S, S) {
            let m = S::from_f64(len as f64);
            let mut sum_gy = S::zero();
            let mut sum_gyx = S::zero();
            for k in start..start + len {
                sum_gy = sum_gy + gys[k];
                sum_gyx = sum_gyx + gys[k] * xh[k];
            }
            let mgy = sum_gy / m;
            let mgyx = sum_gyx / m;
            for k in start..start + len {
                gxs[k] = scale * inv * (gys[k] - mgy - xh[k] * mgyx);
            }
            (sum_gy, sum_gyx)
        };

        match self.kind {
            NormKind::Batch => {
                for ci in 0..c {
                    // A channel's group spans all samples; gather its sums
                    // first, then apply the shared correction.
                    let m = S::from_f64((n * hw) as f64);
                    let mut sum_gy = S::zero();
                    let mut sum_gyx = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for k in base..base + hw {
                            sum_gy = sum_gy + gys[k];
                            sum_gyx = sum_gyx + gys[k] * xh[k];
                        }
                    }
                    let mgy = sum_gy / m;
                    let mgyx = sum_gyx / m;
                    let scale = self.gamma[ci] * cache.inv_std[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for k in base..base + hw {
                            gxs[k] = scale * (gys[k] - mgy - xh[k] * mgyx);
                        }
                    }
                    self.grad_gamma[ci] = self.grad_gamma[ci] + sum_gyx;
                    self.grad_beta[ci] = self.grad_beta[ci] + sum_gy;
                }
            }
            NormKind::Instance => {
                for ni in 0..n {
                    for ci in 0..c {
                        let g = ni * c + ci;
                        let (sum_gy, sum_gyx) = apply_group(
                            g * hw,
                            hw,
                            self.gamma[ci],
                            cache.inv_std[g],
                            gxs,
                        );
                        self.grad_gamma[ci] = self.grad_gamma[ci] + sum_gyx;
                        self.grad_beta[ci] = self.grad_beta[ci] + sum_gy;
                    }
                }
            }
        }
        gx
    }
}

impl<S: Scalar> Params<S> for Norm2d<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>)) {
        f(ParamSlot {
            name: join(prefix, "gamma"),
            dims: self.gamma.shape().to_vec(),
            value: self.gamma.as_slice_mut().unwrap(),
            grad: self.grad_gamma.as_slice_mut().unwrap(),
        });
        f(ParamSlot {
            name: join(prefix, "beta"),
            dims: self.beta.shape().to_vec(),
            value: self.beta.as_slice_mut().unwrap(),
            grad: self.grad_beta.as_slice_mut().unwrap(),
        });
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(BufSlot<'_, S>)) {
        if self.kind == NormKind::Batch {
            f(BufSlot {
                name: join(prefix, "running_mean"),
                dims: self.running_mean.shape().to_vec(),
                value: self.running_mean.as_slice_mut().unwrap(),
            });
            f(BufSlot {
                name: join(prefix, "running_var"),
                dims: self.running_var.shape().to_vec(),
                value: self.running_var.as_slice_mut().unwrap(),
            });
        }
    }
}
