//! Conditional pair discriminator.
//!
//! Scores a (source image, candidate target image) pair: two stride-2
//! convolutions, three plain residual blocks, a 1x1 projection, and global
//! average pooling down to one logit per pair. `discriminate` exposes
//! probabilities; training uses the raw logits with a softplus objective.

use ndarray::{Array1, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    join, BufSlot, Conv2d, ConvBlock, GlobalAvgPool, Mode, NormKind, ParamSlot, Params, Scalar,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub norm: String,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 16,
            residual_blocks: 3,
            norm: "instance".into(),
        }
    }
}

impl DiscriminatorConfig {
    pub fn norm_kind(&self) -> crate::Result<NormKind> {
        match self.norm.as_str() {
            "instance" => Ok(NormKind::Instance),
            "batch" => Ok(NormKind::Batch),
            other => Err(crate::Error::Config(format!(
                "unknown norm kind `{other}` (expected `instance` or `batch`)"
            ))),
        }
    }
}

/// Residual block without normalization: `y = x + conv(lrelu(conv(x)))`.
struct ResBlock<S: Scalar> {
    inner: ConvBlock<S>,
    outer: Conv2d<S>,
}

impl<S: Scalar> ResBlock<S> {
    fn new(channels: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            inner: ConvBlock::new(channels, channels, 3, 1, 1, None, Some(0.2), rng),
            outer: Conv2d::new(channels, channels, 3, 1, 1, 0.0, rng),
        }
    }

    fn forward(&mut self, x: &Array4<S>, mode: Mode) -> Array4<S> {
        self.outer.forward(&self.inner.forward(x, mode), mode) + x
    }

    fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        self.inner.backward(&self.outer.backward(gy)) + gy
    }
}

impl<S: Scalar> Params<S> for ResBlock<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>)) {
        self.inner.visit_params(&join(prefix, "inner"), f);
        self.outer.visit_params(&join(prefix, "outer"), f);
    }
}

pub struct Discriminator<S: Scalar> {
    down1: ConvBlock<S>,
    down2: ConvBlock<S>,
    res: Vec<ResBlock<S>>,
    proj: Conv2d<S>,
    pool: GlobalAvgPool,
}

impl<S: Scalar> Discriminator<S> {
    pub fn new(cfg: &DiscriminatorConfig, rng: &mut impl Rng) -> crate::Result<Self> {
        let norm = cfg.norm_kind()?;
        if cfg.base_channels == 0 {
            return Err(crate::Error::Config(
                "discriminator base_channels must be positive".into(),
            ));
        }
        let c = cfg.base_channels;
        Ok(Discriminator {
            down1: ConvBlock::new(6, c, 4, 2, 1, None, Some(0.2), rng),
            down2: ConvBlock::new(c, 2 * c, 4, 2, 1, Some(norm), Some(0.2), rng),
            res: (0..cfg.residual_blocks)
                .map(|_| ResBlock::new(2 * c, rng))
                .collect(),
            proj: Conv2d::new(2 * c, 1, 1, 1, 0, 0.0, rng),
            pool: GlobalAvgPool::new(),
        })
    }

    /// One logit per pair. `condition` and `candidate` are `(n, 3, h, w)`.
    pub fn forward_logits(
        &mut self,
        condition: &Array4<S>,
        candidate: &Array4<S>,
        mode: Mode,
    ) -> crate::Result<Array1<S>> {
        if condition.dim() != candidate.dim() || condition.dim().1 != 3 {
            return Err(crate::Error::ShapeMismatch {
                context: "discriminator inputs".into(),
                expected: format!("two matching (n,3,h,w) images, got {:?}", condition.dim()),
                found: format!("{:?}", candidate.dim()),
            });
        }
        let x = ndarray::concatenate![Axis(1), condition.view(), candidate.view()];
        let x = if x.is_standard_layout() {
            x
        } else {
            x.as_standard_layout().to_owned()
        };
        let mut cur = self.down1.forward(&x, mode);
        cur = self.down2.forward(&cur, mode);
        for r in self.res.iter_mut() {
            cur = r.forward(&cur, mode);
        }
        let map = self.proj.forward(&cur, mode);
        let pooled = self.pool.forward(&map); // (n, 1)
        Ok(pooled.index_axis(Axis(1), 0).to_owned())
    }

    /// Probability that the pair is real, per sample.
    pub fn discriminate(
        &mut self,
        condition: &Array4<S>,
        candidate: &Array4<S>,
    ) -> crate::Result<Array1<S>> {
        let logits = self.forward_logits(condition, candidate, Mode::Eval)?;
        Ok(crate::nn::sigmoid(&logits))
    }

    /// Backward from logit gradients; returns the gradient of the
    /// *candidate* image (the one the generator produced). The condition
    /// image gradient is discarded since nothing upstream learns from it.
    pub fn backward_logits(&mut self, g_logits: &Array1<S>) -> Array4<S> {
        let n = g_logits.len();
        let g2 = g_logits.clone().into_shape_with_order((n, 1)).unwrap();
        let mut g = self.pool.backward(&g2);
        g = self.proj.backward(&g);
        for r in self.res.iter_mut().rev() {
            g = r.backward(&g);
        }
        g = self.down2.backward(&g);
        g = self.down1.backward(&g);
        // Channels 3.. belong to the candidate image.
        g.slice(ndarray::s![.., 3.., .., ..]).to_owned()
    }
}

impl<S: Scalar> Params<S> for Discriminator<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>)) {
        self.down1.visit_params(&join(prefix, "down1"), f);
        self.down2.visit_params(&join(prefix, "down2"), f);
        for (i, r) in self.res.iter_mut().enumerate() {
            r.visit_params(&join(prefix, &format!("res.{i}")), f);
        }
        self.proj.visit_params(&join(prefix, "proj"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(BufSlot<'_, S>)) {
        self.down1.visit_buffers(&join(prefix, "down1"), f);
        self.down2.visit_buffers(&join(prefix, "down2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{fd_grad_flat, rel_err, sample_indices};
    use crate::rng::derive;
    use ndarray::Array;
    use rand_distr::StandardNormal;

    fn randn4(dims: (usize, usize, usize, usize), tag: &str) -> Array4<f64> {
        let mut rng = derive(55, tag);
        Array::from_shape_simple_fn(dims, || rng.sample(StandardNormal))
    }

    fn tiny_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: 4,
            residual_blocks: 2,
            norm: "instance".into(),
        }
    }

    #[test]
    fn probabilities_are_valid_and_deterministic() {
        let mut d = Discriminator::<f32>::new(&tiny_cfg(), &mut derive(1, "d")).unwrap();
        let a = randn4((3, 3, 32, 32), "a").mapv(|v| v as f32);
        let b = randn4((3, 3, 32, 32), "b").mapv(|v| v as f32);
        let p = d.discriminate(&a, &b).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, d.discriminate(&a, &b).unwrap());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let mut d = Discriminator::<f32>::new(&tiny_cfg(), &mut derive(2, "d")).unwrap();
        let a = Array4::<f32>::zeros((1, 3, 32, 32));
        let b = Array4::<f32>::zeros((1, 3, 16, 16));
        assert!(d.discriminate(&a, &b).is_err());
    }

    #[test]
    fn candidate_gradient_matches_finite_differences() {
        let mut d = Discriminator::<f64>::new(&tiny_cfg(), &mut derive(3, "d")).unwrap();
        let cond = randn4((2, 3, 32, 32), "cond");
        let cand = randn4((2, 3, 32, 32), "cand");
        let gy: Array1<f64> = ndarray::array![0.7, -1.3];
        d.forward_logits(&cond, &cand, Mode::Train).unwrap();
        let g_cand = d.backward_logits(&gy);
        assert_eq!(g_cand.dim(), cand.dim());
        let flat = cand.as_slice().unwrap();
        let mut f = |xs: &[f64]| {
            let x = Array4::from_shape_vec(cand.dim(), xs.to_vec()).unwrap();
            (&d.forward_logits(&cond, &x, Mode::Train).unwrap() * &gy).sum()
        };
        for i in sample_indices(flat.len(), 4) {
            let fd = fd_grad_flat(&mut f, flat, i, 1e-5);
            let an = g_cand.as_slice().unwrap()[i];
            assert!(rel_err(an, fd) < 1e-4, "grad {i}: an={an} fd={fd}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut d = Discriminator::<f64>::new(&tiny_cfg(), &mut derive(4, "d")).unwrap();
        let cond = randn4((1, 3, 32, 32), "cond2");
        let cand = randn4((1, 3, 32, 32), "cand2");
        let gy: Array1<f64> = ndarray::array![1.0];
        d.forward_logits(&cond, &cand, Mode::Train).unwrap();
        d.backward_logits(&gy);
        let mut grads: std::collections::BTreeMap<String, f64> = Default::default();
        d.visit_params("d", &mut |slot| {
            grads.insert(slot.name.clone(), slot.grad[0]);
        });
        let loss = |d: &mut Discriminator<f64>| {
            (&d.forward_logits(&cond, &cand, Mode::Train).unwrap() * &gy).sum()
        };
        for name in [
            "d.down1.conv.weight",
            "d.down2.norm.gamma",
            "d.res.0.inner.conv.weight",
            "d.res.1.outer.bias",
            "d.proj.weight",
        ] {
            let an = grads[name];
            let eps = 1e-5;
            let bump = |delta: f64, d: &mut Discriminator<f64>| {
                d.visit_params("d", &mut |slot| {
                    if slot.name == name {
                        slot.value[0] += delta;
                    }
                });
            };
            bump(eps, &mut d);
            let fp = loss(&mut d);
            bump(-2.0 * eps, &mut d);
            let fm = loss(&mut d);
            bump(eps, &mut d);
            let fd = (fp - fm) / (2.0 * eps);
            assert!(rel_err(an, fd) < 1e-4, "{name}: an={an} fd={fd}");
        }
    }
}
