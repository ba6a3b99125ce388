//! Training objective: adversarial, pixel, and perceptual terms.
//!
//! The perceptual term measures feature distance in a frozen, randomly
//! initialized convolutional pyramid instead of a pretrained network, which
//! keeps the whole system self-contained; random projections preserve enough
//! structure for a distance that correlates with visible differences, and the
//! same architecture (with an independent seed) backs the FID and LPIPS
//! metrics.
//!
//! Probabilities appearing in logs are clamped to `[1e-7, 1 - 1e-7]`; the
//! training path computes the same objective from logits via softplus, which
//! is algebraically identical and needs no clamp.

use log::warn;
use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, LeakyRelu, Mode, Scalar};
use crate::rng::derive;

/// Floor applied to probabilities before `ln`.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub adversarial: f64,
    pub l1: f64,
    pub perceptual: f64,
}

impl LossWeights {
    pub fn combine(&self, adv: f64, l1: f64, perceptual: f64) -> f64 {
        self.adversarial * adv + self.l1 * l1 + self.perceptual * perceptual
    }
}

/// Mean absolute error and its gradient with respect to `pred`.
pub fn l1_loss<S: Scalar>(pred: &Array4<S>, target: &Array4<S>) -> (f64, Array4<S>) {
    assert_eq!(pred.dim(), target.dim(), "l1 operand shapes");
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array4::<S>::zeros(pred.dim());
    let inv = S::from_f64(1.0 / n);
    ndarray::Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .for_each(|g, &a, &b| {
            let d = a - b;
            loss += d.to_f64().abs();
            *g = if d > S::zero() {
                inv
            } else if d < S::zero() {
                -inv
            } else {
                S::zero()
            };
        });
    (loss / n, grad)
}

/// Mean absolute error restricted to masked pixels; `mask` is `(n,1,h,w)`
/// with values in `[0,1]` and broadcasts over channels. Returns 0 when the
/// mask is empty.
pub fn masked_l1<S: Scalar>(pred: &Array4<S>, target: &Array4<S>, mask: &Array4<S>) -> f64 {
    let (n, c, h, w) = pred.dim();
    assert_eq!(target.dim(), pred.dim());
    assert_eq!(mask.dim(), (n, 1, h, w), "mask must be (n,1,h,w)");
    let mut num = 0.0;
    let mut den = 0.0;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let m = mask[[ni, 0, y, x]].to_f64();
                den += m;
                for ci in 0..c {
                    num += m * (pred[[ni, ci, y, x]] - target[[ni, ci, y, x]]).to_f64().abs();
                }
            }
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / (den * c as f64)
    }
}

/// Frozen random convolutional pyramid used for perceptual distances.
///
/// Three stride-2 3x3 convolutions with leaky-ReLU; parameters are sampled
/// once from the seed and never trained. Gradients flow through it to the
/// input but its own accumulated parameter gradients are ignored.
pub struct FeatureExtractor<S: Scalar> {
    convs: Vec<Conv2d<S>>,
    acts: Vec<LeakyRelu<S>>,
    pub seed: u64,
}

pub const EXTRACTOR_CHANNELS: [usize; 3] = [16, 32, 32];

impl<S: Scalar> FeatureExtractor<S> {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = derive(seed, "feature-extractor");
        let mut convs = Vec::new();
        let mut acts = Vec::new();
        let mut c_in = in_channels;
        for &c_out in EXTRACTOR_CHANNELS.iter() {
            convs.push(Conv2d::new(c_in, c_out, 3, 2, 1, 0.2, &mut rng));
            acts.push(LeakyRelu::new(0.2));
            c_in = c_out;
        }
        FeatureExtractor { convs, acts, seed }
    }

    /// Width of the deepest layer, i.e. the embedding size after pooling.
    pub fn out_channels(&self) -> usize {
        *EXTRACTOR_CHANNELS.last().unwrap()
    }

    /// Features after every conv + activation stage, shallow to deep.
    /// `Mode::Train` caches activations for a following [`Self::backward`].
    pub fn forward(&mut self, x: &Array4<S>, mode: Mode) -> Vec<Array4<S>> {
        let mut feats = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for (conv, act) in self.convs.iter_mut().zip(self.acts.iter_mut()) {
            cur = act.forward(&conv.forward(&cur, mode), mode);
            feats.push(cur.clone());
        }
        feats
    }

    /// Backpropagate per-layer feature gradients to the input.
    pub fn backward(&mut self, layer_grads: &[Array4<S>]) -> Array4<S> {
        assert_eq!(layer_grads.len(), self.convs.len());
        let mut g = layer_grads.last().unwrap().clone();
        for i in (0..self.convs.len()).rev() {
            g = self.convs[i].backward(&self.acts[i].backward(&g));
            if i > 0 {
                g = g + &layer_grads[i - 1];
            }
        }
        g
    }
}

/// Perceptual distance: per layer, the mean squared feature difference
/// (averaged over batch, channels, and positions), summed over layers.
/// Returns the loss and its gradient with respect to `pred`.
pub fn perceptual_loss<S: Scalar>(
    ext: &mut FeatureExtractor<S>,
    pred: &Array4<S>,
    target: &Array4<S>,
) -> (f64, Array4<S>) {
    let fa = ext.forward(pred, Mode::Train);
    let fb = ext.forward(target, Mode::Eval);
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(fa.len());
    for (a, b) in fa.iter().zip(fb.iter()) {
        let numel = a.len() as f64;
        let diff = a - b;
        loss += diff
            .iter()
            .map(|&d| {
                let v = d.to_f64();
                v * v
            })
            .sum::<f64>()
            / numel;
        grads.push(diff * S::from_f64(2.0 / numel));
    }
    (loss, ext.backward(&grads))
}

/// Value of the perceptual distance only (no gradient bookkeeping).
pub fn perceptual_value<S: Scalar>(
    ext: &mut FeatureExtractor<S>,
    pred: &Array4<S>,
    target: &Array4<S>,
) -> f64 {
    let fa = ext.forward(pred, Mode::Eval);
    let fb = ext.forward(target, Mode::Eval);
    fa.iter()
        .zip(fb.iter())
        .map(|(a, b)| {
            (a - b)
                .iter()
                .map(|&d| {
                    let v = d.to_f64();
                    v * v
                })
                .sum::<f64>()
                / a.len() as f64
        })
        .sum()
}

fn softplus<S: Scalar>(z: S) -> S {
    z.max(S::zero()) + (S::one() + (-z.abs()).exp()).ln()
}

/// Mean binary cross-entropy on logits against a constant target, with the
/// per-logit gradient `(sigmoid(z) - target) / n`. Algebraically equal to the
/// probability-space objective but stable at any logit magnitude.
pub fn bce_with_logits<S: Scalar>(logits: &Array1<S>, target: f64) -> (f64, Array1<S>) {
    let n = logits.len() as f64;
    let t = S::from_f64(target);
    let inv_n = S::from_f64(1.0 / n);
    let mut loss = 0.0;
    let grad = logits.mapv(|z| {
        loss += (softplus(z) - t * z).to_f64();
        let p = if z >= S::zero() {
            S::one() / (S::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (S::one() + e)
        };
        (p - t) * inv_n
    });
    (loss / n, grad)
}

/// Mean binary cross-entropy on probabilities with the `ln` clamp. Warns when
/// any probability actually hits the clamp, since that means the
/// discriminator has saturated.
pub fn bce_probs<S: Scalar>(probs: &Array1<S>, target: f64) -> f64 {
    let lo = LOG_CLAMP;
    let hi = 1.0 - LOG_CLAMP;
    let mut clamped = 0usize;
    let mut loss = 0.0;
    for &p in probs.iter() {
        let p = p.to_f64();
        let pc = p.clamp(lo, hi);
        if pc != p {
            clamped += 1;
        }
        loss += -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
    }
    if clamped > 0 {
        warn!("{clamped} probability value(s) clamped to [{lo:e}, {hi}] before ln");
    }
    loss / probs.len() as f64
}

/// Discriminator objective on logits: real pairs toward `real_label`, fake
/// pairs toward `fake_label`. Returns `(loss, grad_real, grad_fake)`.
pub fn adversarial_d_loss<S: Scalar>(
    logits_real: &Array1<S>,
    logits_fake: &Array1<S>,
    real_label: f64,
    fake_label: f64,
) -> (f64, Array1<S>, Array1<S>) {
    let (lr, gr) = bce_with_logits(logits_real, real_label);
    let (lf, gf) = bce_with_logits(logits_fake, fake_label);
    (lr + lf, gr, gf)
}

/// Non-saturating generator objective on fake logits: `-mean log D(fake)`.
pub fn adversarial_g_loss<S: Scalar>(logits_fake: &Array1<S>) -> (f64, Array1<S>) {
    bce_with_logits(logits_fake, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{
        adv_d_oracle, adv_g_oracle, bce_mean_oracle, fd_grad_flat, l1_mean_oracle,
        perceptual_layer_oracle, rel_err, sample_indices,
    };
    use ndarray::{Array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(dims, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn l1_matches_oracle_and_finite_differences() {
        let a = rand4((2, 3, 5, 5), 1);
        let b = rand4((2, 3, 5, 5), 2);
        let (loss, grad) = l1_loss(&a, &b);
        let want = l1_mean_oracle(a.as_slice().unwrap(), b.as_slice().unwrap());
        assert!((loss - want).abs() < 1e-12);
        // FD check at sampled coordinates (|d| is smooth away from 0, and
        // random continuous inputs do not produce exact ties).
        let flat_a = a.as_slice().unwrap();
        let mut f = |xs: &[f64]| l1_mean_oracle(xs, b.as_slice().unwrap());
        for i in sample_indices(flat_a.len(), 7) {
            let fd = fd_grad_flat(&mut f, flat_a, i, 1e-7);
            let an = grad.as_slice().unwrap()[i];
            assert!(rel_err(an, fd) < 1e-4, "index {i}: fd={fd} analytic={an}");
        }
    }

    #[test]
    fn masked_l1_ignores_background() {
        let a = rand4((1, 2, 2, 2), 3);
        let mut b = a.clone();
        // Corrupt one background pixel heavily and one foreground pixel by 0.5.
        b[[0, 0, 0, 0]] += 100.0;
        b[[0, 0, 1, 1]] += 0.5;
        let mut mask = Array4::<f64>::zeros((1, 1, 2, 2));
        mask[[0, 0, 1, 1]] = 1.0;
        mask[[0, 0, 1, 0]] = 1.0;
        let v = masked_l1(&a, &b, &mask);
        // Foreground: two pixels, two channels; only one entry differs by 0.5.
        assert!((v - 0.5 / 4.0).abs() < 1e-12, "v={v}");
        let empty = Array4::<f64>::zeros((1, 1, 2, 2));
        assert_eq!(masked_l1(&a, &b, &empty), 0.0);
    }

    #[test]
    fn extractor_is_deterministic_and_frozen_across_instances() {
        let mut e1 = FeatureExtractor::<f32>::new(3, 77);
        let mut e2 = FeatureExtractor::<f32>::new(3, 77);
        let x = rand4((1, 3, 32, 32), 4).mapv(|v| v as f32);
        let f1 = e1.forward(&x, Mode::Eval);
        let f2 = e2.forward(&x, Mode::Eval);
        assert_eq!(f1.len(), 3);
        assert_eq!(f1[2].dim(), (1, 32, 4, 4));
        for (a, b) in f1.iter().zip(f2.iter()) {
            assert_eq!(a, b);
        }
        let mut e3 = FeatureExtractor::<f32>::new(3, 78);
        let f3 = e3.forward(&x, Mode::Eval);
        assert_ne!(f1[0], f3[0], "different seeds must differ");
    }

    #[test]
    fn perceptual_matches_layer_oracle() {
        let mut ext = FeatureExtractor::<f64>::new(3, 5);
        let a = rand4((2, 3, 16, 16), 5);
        let b = rand4((2, 3, 16, 16), 6);
        let (loss, _) = perceptual_loss(&mut ext, &a, &b);
        let fa = ext.forward(&a, Mode::Eval);
        let fb = ext.forward(&b, Mode::Eval);
        let want: f64 = fa
            .iter()
            .zip(fb.iter())
            .map(|(x, y)| perceptual_layer_oracle(x.as_slice().unwrap(), y.as_slice().unwrap()))
            .sum();
        assert!((loss - want).abs() < 1e-12);
        assert!((perceptual_value(&mut ext, &a, &b) - want).abs() < 1e-12);
        assert_eq!(perceptual_value(&mut ext, &a, &a), 0.0);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let mut ext = FeatureExtractor::<f64>::new(2, 8);
        let a = rand4((1, 2, 8, 8), 7);
        let b = rand4((1, 2, 8, 8), 8);
        let (_, grad) = perceptual_loss(&mut ext, &a, &b);
        let flat = a.as_slice().unwrap();
        let mut f = |xs: &[f64]| {
            let xa = Array4::from_shape_vec(a.dim(), xs.to_vec()).unwrap();
            perceptual_value(&mut ext, &xa, &b)
        };
        for i in sample_indices(flat.len(), 6) {
            let fd = fd_grad_flat(&mut f, flat, i, 1e-6);
            let an = grad.as_slice().unwrap()[i];
            assert!(rel_err(an, fd) < 1e-5, "index {i}: fd={fd} analytic={an}");
        }
    }

    #[test]
    fn logit_bce_equals_probability_oracle_when_unsaturated() {
        let z: Array1<f64> = ndarray::array![0.5, -1.2, 2.0, 0.0];
        let p: Vec<f64> = z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        for target in [1.0, 0.0, 0.9, 0.1] {
            let (loss, _) = bce_with_logits(&z, target);
            let want = bce_mean_oracle(&p, target, LOG_CLAMP);
            assert!((loss - want).abs() < 1e-12, "target {target}");
        }
        // Probability-space op agrees too.
        let pa = Array1::from(p);
        assert!((bce_probs(&pa, 0.9) - bce_with_logits(&z, 0.9).0).abs() < 1e-12);
    }

    #[test]
    fn logit_bce_gradient_matches_finite_differences() {
        let z: Array1<f64> = ndarray::array![0.3, -2.0, 1.5];
        let (_, grad) = bce_with_logits(&z, 0.9);
        let mut f = |xs: &[f64]| bce_with_logits(&Array1::from(xs.to_vec()), 0.9).0;
        for i in 0..3 {
            let fd = fd_grad_flat(&mut f, z.as_slice().unwrap(), i, 1e-6);
            assert!(rel_err(grad[i], fd) < 1e-7);
        }
    }

    #[test]
    fn adversarial_losses_match_oracles() {
        let zr: Array1<f64> = ndarray::array![0.8, -0.3];
        let zf: Array1<f64> = ndarray::array![-1.0, 0.2];
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let pr: Vec<f64> = zr.iter().map(|&v| sig(v)).collect();
        let pf: Vec<f64> = zf.iter().map(|&v| sig(v)).collect();
        let (d, _, _) = adversarial_d_loss(&zr, &zf, 0.9, 0.1);
        assert!((d - adv_d_oracle(&pr, &pf, 0.9, 0.1, LOG_CLAMP)).abs() < 1e-12);
        let (g, _) = adversarial_g_loss(&zf);
        assert!((g - adv_g_oracle(&pf, LOG_CLAMP)).abs() < 1e-12);
    }

    #[test]
    fn clamped_probability_loss_stays_finite() {
        let p: Array1<f64> = ndarray::array![0.0, 1.0];
        let v = bce_probs(&p, 1.0);
        assert!(v.is_finite());
        // p=0 contributes -ln(1e-7), p=1 contributes ~0.
        assert!((v - (-(LOG_CLAMP.ln()) / 2.0)).abs() < 1e-6);
    }

    #[test]
    fn weights_combine_linearly() {
        let w = LossWeights {
            adversarial: 10.0,
            l1: 15.0,
            perceptual: 5.0,
        };
        assert_eq!(w.combine(1.0, 2.0, 3.0), 10.0 + 30.0 + 15.0);
    }
}
