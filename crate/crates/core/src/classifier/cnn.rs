use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use specvae_nn::{Adam, AdamConfig, Graph, Linear, Mode, ParamStore, Tensor};

use super::{argmax_rows, check_labels, Predictor};
use crate::error::{Error, Result};
use crate::nets::{image_batch, ResidualConfig, ResidualTrunk};
use crate::synth::{Dims, Spectrogram};
use crate::trace::LossTrace;
use crate::vae::{Trained, INFER_CHUNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub residual: ResidualConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { residual: ResidualConfig::desk(), epochs: 10, batch_size: 32, lr: 1e-3, seed: 0 }
    }
}

/// Raw-spectrogram baseline: residual trunk, global pooling, linear head.
#[derive(Clone, Debug)]
pub struct ResidualCnn {
    pub dims: Dims,
    pub n_classes: usize,
    pub params: ParamStore<f32>,
    trunk: ResidualTrunk,
    head: Linear,
}

impl ResidualCnn {
    pub fn new(cfg: &ResidualConfig, dims: Dims, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let trunk = ResidualTrunk::new(&mut params, "cnn", cfg, (0.9, 1e-5), &mut rng);
        let head = Linear::new(&mut params, "cnn.head", cfg.out_channels(), n_classes, &mut rng);
        ResidualCnn { dims, n_classes, params, trunk, head }
    }

    pub fn logits(&self, xs: &[&Spectrogram]) -> Tensor<f32> {
        let mut g = Graph::new();
        let x = g.input(image_batch(xs));
        let f = self.trunk.forward(&mut g, &self.params, x, Mode::Eval);
        let y = self.head.forward(&mut g, &self.params, f);
        g.value(y).clone()
    }
}

impl Predictor<Spectrogram> for ResidualCnn {
    fn predict(&self, xs: &[&Spectrogram]) -> Vec<usize> {
        xs.chunks(INFER_CHUNK).flat_map(|c| argmax_rows(&self.logits(c))).collect()
    }
}

pub fn train_baseline_cnn(data: &[&Spectrogram], labels: &[usize], n_classes: usize, cfg: &CnnConfig) -> Result<Trained<ResidualCnn>> {
    check_labels(data.len(), labels, n_classes)?;
    if cfg.epochs == 0 || cfg.batch_size < 2 {
        return Err(Error::config("cnn needs epochs >= 1 and batch_size >= 2"));
    }
    let dims = data[0].dims();
    if let Some(x) = data.iter().find(|x| x.dims() != dims) {
        return Err(Error::dims("cnn input", dims, x.dims()));
    }
    let mut model = ResidualCnn::new(&cfg.residual, dims, n_classes, cfg.seed);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = LossTrace::new(&["loss"]);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch: Vec<&Spectrogram> = chunk.iter().map(|&i| data[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.input(image_batch(&batch));
            let f = model.trunk.forward(&mut g, &model.params, x, Mode::Train);
            let logits = model.head.forward(&mut g, &model.params, f);
            let loss = g.cross_entropy(logits, &y);
            let l = g.value(loss).data()[0] as f64;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, term: "loss".into(), trace: Box::new(trace) });
            }
            g.backward(loss);
            let grads = g.grads_for(&model.params);
            opt.step(&mut model.params, &grads);
            g.commit_stats(&mut model.params);
            sum += l;
            batches += 1;
        }
        trace.push(vec![sum / batches.max(1) as f64]);
    }
    Ok(Trained { model, trace })
}
