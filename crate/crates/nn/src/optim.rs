use crate::params::{ParamKind, ParamStore};
use crate::scalar::Element;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction, bound to the layout of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| s.entries().iter().map(|e| vec![T::zero(); e.value.numel()]).collect();
        Adam { config, step: 0, m: zeros(store), v: zeros(store) }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; entries with no gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.len(), "gradient list does not match store");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let step_size = T::c(c.lr / bc1);
        let bc2_sqrt = T::c(bc2.sqrt());
        let eps = T::c(c.eps);
        for (k, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = &grads[k] else { continue };
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &gi), mi), vi) in entry.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *p -= step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
