use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use specvae_nn::{Adam, AdamConfig, Graph, ParamStore, Tensor};

use super::loss::{permute_dims, tc_from_logits};
use crate::error::{Error, Result};
use crate::nets::{row_batch, Mlp};

/// Fresh discriminator used to measure total correlation of a latent set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcEstimatorConfig {
    pub width: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TcEstimatorConfig {
    fn default() -> Self {
        TcEstimatorConfig { width: 256, layers: 4, epochs: 20, batch_size: 64, lr: 1e-4, seed: 0 }
    }
}

/// Trains a discriminator on the first half of `latents` (joint vs.
/// column-permuted batches) and returns the mean logit difference on the
/// held-out second half.
pub fn estimate_tc(latents: &[Vec<f64>], cfg: &TcEstimatorConfig) -> Result<f64> {
    if latents.len() < 4 {
        return Err(Error::Range { field: "latents", msg: format!("need at least 4 samples, got {}", latents.len()) });
    }
    let d = latents[0].len();
    if let Some(z) = latents.iter().find(|z| z.len() != d) {
        return Err(Error::dims("latent vector", d, z.len()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Range { field: "batch_size", msg: "must be at least 2".into() });
    }
    let (train, held) = latents.split_at(latents.len() / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let net = Mlp::new(&mut store, "tc", d, cfg.width, cfg.layers, 2, 0.2, &mut rng);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, beta1: 0.5, beta2: 0.9, eps: 1e-8 }, &store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| train[i].as_slice()).collect();
            let z: Tensor<f32> = row_batch(&rows);
            let zp = permute_dims(&z, &mut rng);
            let mut g = Graph::new();
            let zj = g.input(z);
            let zp = g.input(zp);
            let lj = net.forward(&mut g, &store, zj);
            let lp = net.forward(&mut g, &store, zp);
            let a = g.cross_entropy(lj, &vec![0; chunk.len()]);
            let c = g.cross_entropy(lp, &vec![1; chunk.len()]);
            let loss = g.add(a, c);
            g.backward(loss);
            let grads = g.grads_for(&store);
            opt.step(&mut store, &grads);
        }
    }
    let rows: Vec<&[f64]> = held.iter().map(|z| z.as_slice()).collect();
    let mut g = Graph::new();
    let z = g.input(row_batch::<f32>(&rows));
    let l = net.forward(&mut g, &store, z);
    tc_from_logits(g.value(l))
}
