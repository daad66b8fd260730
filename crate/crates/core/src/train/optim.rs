use alloc::vec::Vec;

use crate::params::{ParamGroup, ParamStore};

/// One momentum-SGD update with weight decay added to the gradient:
/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// `base_lr · 0.5 · (1 + cos(π·e/E))`.
pub fn cosine_lr(epoch: usize, epochs: usize, base_lr: f64) -> f64 {
    if epochs == 0 {
        return base_lr;
    }
    base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * epoch as f64 / epochs as f64))
}

/// `base_lr · decay^k` where `k` counts milestones already reached.
pub fn step_lr(epoch: usize, milestones: &[usize], decay: f64, base_lr: f64) -> f64 {
    let k = milestones.iter().filter(|&&m| epoch >= m).count();
    base_lr * libm::pow(decay, k as f64)
}

/// Momentum SGD over every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub arch_weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            arch_weight_decay: 0.0,
            velocity: store.params().iter().map(|p| alloc::vec![0.0; p.value.len()]).collect(),
        }
    }

    fn decay(&self, group: ParamGroup) -> f64 {
        if group == ParamGroup::Arch {
            self.arch_weight_decay
        } else {
            self.weight_decay
        }
    }

    /// Updates trainable parameters; frozen ones keep both value and
    /// velocity untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let (wd, arch_wd, momentum) = (self.weight_decay, self.arch_weight_decay, self.momentum);
        for (p, v) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            let wd = if p.group == ParamGroup::Arch { arch_wd } else { wd };
            sgd_step(p.value.data_mut(), &p.grad, v, lr, momentum, wd);
        }
    }

    /// Whether [`Sgd::step`] would keep every parameter and velocity finite.
    /// Nothing is modified.
    pub fn step_is_finite(&self, store: &ParamStore, lr: f64) -> bool {
        store.params().iter().zip(&self.velocity).filter(|(p, _)| p.trainable).all(|(p, v)| {
            let wd = self.decay(p.group);
            p.value.data().iter().zip(&p.grad).zip(v).all(|((&w, &g), &v)| {
                let v = self.momentum * v + g + wd * w;
                v.is_finite() && (w - lr * v).is_finite()
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::Tensor;

    #[test]
    fn overflowing_step_is_detected_before_it_lands() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], alloc::vec![1.0, 2.0]).unwrap(), ParamGroup::Base);
        store.params_mut()[0].grad = alloc::vec![1.0, 1e300];
        let opt = Sgd::new(&store, 0.9, 0.0);
        assert!(opt.step_is_finite(&store, 1.0));
        assert!(!opt.step_is_finite(&store, 1e10));
        assert_eq!(store.params()[0].value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn plain_gradient_descent_without_momentum_or_decay() {
        let mut p = [1.0, -2.0];
        let mut v = [0.0; 2];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(p, [1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn zero_gradient_and_decay_leave_params() {
        let mut p = [3.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.5, 0.9, 0.0);
        assert_eq!(p, [3.0]);
    }

    #[test]
    fn two_momentum_steps_follow_velocity_recursion() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut p = [2.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.5], &mut v, lr, mu, wd);
        sgd_step(&mut p, &[-0.3], &mut v, lr, mu, wd);
        let v1 = 0.5 + wd * 2.0;
        let p1 = 2.0 - lr * v1;
        let v2 = mu * v1 + (-0.3 + wd * p1);
        let p2 = p1 - lr * v2;
        assert!((p[0] - p2).abs() < 1e-15);
        assert!((v[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn step_schedule_reproduces_scratch_protocol() {
        let m = [150, 225, 300];
        assert_eq!(step_lr(0, &m, 0.1, 0.065), 0.065);
        assert_eq!(step_lr(149, &m, 0.1, 0.065), 0.065);
        assert!((step_lr(150, &m, 0.1, 0.065) - 0.0065).abs() < 1e-15);
        assert!((step_lr(224, &m, 0.1, 0.065) - 0.0065).abs() < 1e-15);
        assert!((step_lr(225, &m, 0.1, 0.065) - 0.00065).abs() < 1e-16);
        assert!((step_lr(349, &m, 0.1, 0.065) - 0.000065).abs() < 1e-17);
    }

    proptest! {
        #[test]
        fn zero_momentum_and_decay_is_vanilla_descent(
            p in proptest::collection::vec(-10.0f64..10.0, 1..8),
            lr in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let g: Vec<f64> = p.iter().enumerate().map(|(i, x)| x * 0.3 - (seed + i as u64) as f64 * 1e-3).collect();
            let mut q = p.clone();
            let mut v = alloc::vec![0.0; p.len()];
            sgd_step(&mut q, &g, &mut v, lr, 0.0, 0.0);
            for i in 0..p.len() {
                prop_assert_eq!(q[i], p[i] - lr * g[i]);
            }
        }

        #[test]
        fn cosine_is_non_increasing(epochs in 1usize..400, base in 0.001f64..1.0) {
            let mut prev = f64::INFINITY;
            for e in 0..=epochs {
                let lr = cosine_lr(e, epochs, base);
                prop_assert!(lr <= prev + 1e-15 && lr >= -1e-15);
                prev = lr;
            }
        }
    }
}
