use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use specvae_nn::{Adam, AdamConfig, Element, Graph, Mode, Tensor, Var};

use super::loss::{kl_term, permute_dims, recon_term, reparam_term, tc_term};
use super::{VaeArch, VaeModel};
use crate::error::{Error, Result};
use crate::nets::image_batch;
use crate::synth::Spectrogram;
use crate::trace::LossTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub gamma: f64,
    /// Encoder/decoder learning rate (Adam, betas 0.9/0.999).
    pub lr: f64,
    /// Discriminator learning rate (Adam, betas 0.5/0.9).
    pub disc_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig { epochs: 30, batch_size: 32, beta: 1.0, gamma: 10.0, lr: 1e-3, disc_lr: 1e-4, seed: 0 }
    }

    pub fn full_scale() -> Self {
        TrainConfig { epochs: 250, batch_size: 64, lr: 1e-4, ..Self::desk() }
    }

    /// `beta = 1, gamma = 0`.
    pub fn vanilla() -> Self {
        TrainConfig { beta: 1.0, gamma: 0.0, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Range { field: "epochs", msg: "must be at least 1".into() });
        }
        if self.batch_size < 2 {
            return Err(Error::Range { field: "batch_size", msg: "must be at least 2".into() });
        }
        for (field, v) in [("lr", self.lr), ("disc_lr", self.disc_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Range { field, msg: format!("must be positive, got {v}") });
            }
        }
        Ok(())
    }
}

/// A trained model together with its per-epoch loss trace.
#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub trace: LossTrace,
}

pub struct Objective {
    pub recon: Var,
    pub kl: Var,
    pub tc: Option<Var>,
    pub total: Var,
    pub z: Var,
}

/// Builds `recon + beta * kl + gamma * tc` for an image batch. The TC term
/// is only built when `gamma > 0`.
pub fn objective<T: Element>(model: &VaeModel<T>, g: &mut Graph<T>, x: Var, noise: Tensor<T>, mode: Mode) -> Objective {
    let (mu, lv) = model.encode_graph(g, x, mode);
    let z = reparam_term(g, mu, lv, noise);
    let x_hat = model.decode_graph(g, z, mode);
    let recon = recon_term(g, x, x_hat);
    let kl = kl_term(g, mu, lv);
    let bkl = g.scale(kl, model.beta);
    let mut total = g.add(recon, bkl);
    let mut tc = None;
    if model.gamma > 0.0 {
        let logits = model.disc_graph(g, z);
        let t = tc_term(g, logits);
        let gt = g.scale(t, model.gamma);
        total = g.add(total, gt);
        tc = Some(t);
    }
    Objective { recon, kl, tc, total, z }
}

pub const TRACE_COLUMNS: [&str; 5] = ["recon", "kl", "tc", "total", "disc"];

/// Alternates one encoder/decoder step and one discriminator step per batch.
///
/// With `gamma == 0` the discriminator is left untrained and the `tc` and
/// `disc` trace columns stay at zero.
pub fn train_factorvae<T: Element>(data: &[&Spectrogram], arch: &VaeArch, cfg: &TrainConfig) -> Result<Trained<VaeModel<T>>> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    cfg.validate()?;
    let mut model = VaeModel::<T>::new(arch.clone(), cfg.beta, cfg.gamma, cfg.seed)?;
    model.check_input(data)?;
    let d = arch.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let vae_opt = AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let disc_opt = AdamConfig { lr: cfg.disc_lr, beta1: 0.5, beta2: 0.9, eps: 1e-8 };
    let mut opt_e = Adam::new(vae_opt, &model.encoder_params);
    let mut opt_d = Adam::new(vae_opt, &model.decoder_params);
    let mut opt_disc = Adam::new(disc_opt, &model.disc_params);
    let mut trace = LossTrace::new(&TRACE_COLUMNS);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let b = chunk.len();
            let batch: Vec<&Spectrogram> = chunk.iter().map(|&i| data[i]).collect();
            let noise = Tensor::randn(&[b, d], &mut rng);

            let mut g = Graph::new();
            g.freeze(&model.disc_params);
            let x = g.input(image_batch::<T>(&batch));
            let o = objective(&model, &mut g, x, noise, Mode::Train);
            let val = |v: Var| g.value(v).data()[0].as_f64();
            let row = [val(o.recon), val(o.kl), o.tc.map_or(0.0, val), val(o.total)];
            for (name, v) in TRACE_COLUMNS.iter().zip(row) {
                if !v.is_finite() {
                    return Err(Error::Diverged { epoch, term: name.to_string(), trace: Box::new(trace) });
                }
            }
            g.backward(o.total);
            let ge = g.grads_for(&model.encoder_params);
            let gd = g.grads_for(&model.decoder_params);
            opt_e.step(&mut model.encoder_params, &ge);
            opt_d.step(&mut model.decoder_params, &gd);
            g.commit_stats(&mut model.encoder_params);
            g.commit_stats(&mut model.decoder_params);
            let z = g.value(o.z).clone();
            drop(g);

            let mut disc_loss = 0.0;
            if cfg.gamma > 0.0 {
                let zp = permute_dims(&z, &mut rng);
                let mut g = Graph::new();
                let zj = g.input(z);
                let zp = g.input(zp);
                let lj = model.disc_graph(&mut g, zj);
                let lp = model.disc_graph(&mut g, zp);
                let a = g.cross_entropy(lj, &vec![0; b]);
                let c = g.cross_entropy(lp, &vec![1; b]);
                let s = g.add(a, c);
                let loss = g.scale(s, 0.5);
                disc_loss = g.value(loss).data()[0].as_f64();
                if !disc_loss.is_finite() {
                    return Err(Error::Diverged { epoch, term: "disc".into(), trace: Box::new(trace) });
                }
                g.backward(loss);
                let gr = g.grads_for(&model.disc_params);
                opt_disc.step(&mut model.disc_params, &gr);
            }
            for (s, v) in sums.iter_mut().zip(row.into_iter().chain([disc_loss])) {
                *s += v;
            }
            batches += 1;
        }
        trace.push(sums.iter().map(|s| s / batches.max(1) as f64).collect());
    }
    Ok(Trained { model, trace })
}
