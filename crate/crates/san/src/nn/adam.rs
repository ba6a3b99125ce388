//! Adam optimizer over named parameter slots.

use super::{ParamSlot, Scalar};
use std::collections::BTreeMap;

#[derive(Clone)]
pub struct Moments<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

/// First/second-moment state is keyed by parameter name, so any model that
/// exposes stable names through its `Params` visitor can be optimized and the
/// state can round-trip through checkpoints.
pub struct Adam<S: Scalar> {
    beta1: S,
    beta2: S,
    eps: S,
    t: u64,
    state: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1: S::from_f64(beta1),
            beta2: S::from_f64(beta2),
            eps: S::from_f64(1e-8),
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One update over every parameter the visitor yields. Typical call:
    /// `opt.step(lr, |f| model.visit_params("g", f))`.
    pub fn step(&mut self, lr: f64, visit: impl FnOnce(&mut dyn FnMut(ParamSlot<'_, S>))) {
        self.t += 1;
        let lr = S::from_f64(lr);
        let bc1 = S::from_f64(1.0 - self.beta1.to_f64().powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - self.beta2.to_f64().powi(self.t as i32));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let one = S::one();
        let state = &mut self.state;
        visit(&mut |slot: ParamSlot<'_, S>| {
            let n = slot.value.len();
            let mom = state.entry(slot.name).or_insert_with(|| Moments {
                m: vec![S::zero(); n],
                v: vec![S::zero(); n],
            });
            assert_eq!(mom.m.len(), n, "parameter size changed under optimizer");
            for i in 0..n {
                let g = slot.grad[i];
                mom.m[i] = b1 * mom.m[i] + (one - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (one - b2) * g * g;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                slot.value[i] = slot.value[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }

    /// Checkpoint export: `(name, moments)` pairs in name order, plus `t`.
    pub fn export(&self) -> (u64, &BTreeMap<String, Moments<S>>) {
        (self.t, &self.state)
    }

    pub fn restore(&mut self, t: u64, state: BTreeMap<String, Moments<S>>) {
        self.t = t;
        self.state = state;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn visit_one<'a, S: Scalar>(
        name: &str,
        value: &'a mut [S],
        grad: &'a mut [S],
    ) -> ParamSlot<'a, S> {
        ParamSlot {
            name: name.to_string(),
            dims: vec![value.len()],
            value,
            grad,
        }
    }

    #[test]
    fn first_step_moves_by_roughly_lr_times_sign() {
        let mut opt = Adam::<f64>::new(0.9, 0.999);
        let mut p = [1.0, -2.0];
        let mut g = [0.3, -5.0];
        opt.step(0.01, |f| f(visit_one("p", &mut p, &mut g)));
        // With bias correction, the first step is lr * g / (|g| + eps').
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut opt = Adam::<f64>::new(0.9, 0.999);
        let target = [3.0, -1.5, 0.25];
        let mut p = [0.0; 3];
        for _ in 0..2000 {
            let mut g: Vec<f64> = p.iter().zip(&target).map(|(a, c)| 2.0 * (a - c)).collect();
            opt.step(0.05, |f| f(visit_one("p", &mut p, &mut g)));
        }
        for (a, c) in p.iter().zip(&target) {
            assert!((a - c).abs() < 1e-3, "got {a}, want {c}");
        }
    }

    #[test]
    fn state_is_per_parameter_name() {
        let mut opt = Adam::<f32>::new(0.5, 0.9);
        let mut a = [1.0f32];
        let mut ga = [1.0f32];
        let mut b = [1.0f32];
        let mut gb = [-1.0f32];
        opt.step(0.1, |f| {
            f(visit_one("a", &mut a, &mut ga));
            f(visit_one("b", &mut b, &mut gb));
        });
        assert!(a[0] < 1.0);
        assert!(b[0] > 1.0);
        let (t, state) = opt.export();
        assert_eq!(t, 1);
        assert_eq!(state.len(), 2);
        assert!(state["a"].m[0] > 0.0);
        assert!(state["b"].m[0] < 0.0);
    }
}
