//! Parameterized building blocks. Each layer only holds [`ParamId`]s; the
//! tensors live in the owning network's [`ParamStore`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Element;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform<T: Element, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::c(rng.random_range(-bound..=bound))).collect())
}

/// Fully connected layer, uniform init in `±1/sqrt(fan_in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), ParamKind::Trainable, uniform(&[outputs, inputs], bound, rng));
        let b = store.add(format!("{name}.bias"), ParamKind::Trainable, uniform(&[outputs], bound, rng));
        Linear { w, b, inputs, outputs }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), ParamKind::Trainable, uniform(&[c_out, c_in, kernel, kernel], bound, rng));
        let b = store.add(format!("{name}.bias"), ParamKind::Trainable, uniform(&[c_out], bound, rng));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_out * kernel * kernel) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), ParamKind::Trainable, uniform(&[c_in, c_out, kernel, kernel], bound, rng));
        let b = store.add(format!("{name}.bias"), ParamKind::Trainable, uniform(&[c_out], bound, rng));
        ConvTranspose2d { w, b, stride, pad, out_pad }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.out_pad)
    }
}

/// Batch normalization over dimension 1 with running statistics.
///
/// `momentum` is the weight kept on the old running value:
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, momentum: f64, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.weight"), ParamKind::Trainable, Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[channels]));
        let running_mean = store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels]));
        let running_var = store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[channels], T::one()));
        BatchNorm { gamma, beta, running_mean, running_var, momentum, eps }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps);
                let keep = T::c(self.momentum);
                let take = T::one() - keep;
                let blend = |old: &Tensor<T>, new: &[T]| {
                    let data = old.data().iter().zip(new).map(|(&o, &n)| keep * o + take * n).collect();
                    Tensor::new(old.shape(), data)
                };
                let rm = blend(store.get(self.running_mean), &stats.mean);
                let rv = blend(store.get(self.running_var), &stats.var);
                g.record_stat_update(store, self.running_mean, rm);
                g.record_stat_update(store, self.running_var, rv);
                y
            }
            Mode::Eval => {
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }
}
