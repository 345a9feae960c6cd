use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use specvae_nn::{Adam, AdamConfig, BatchNorm, Graph, Linear, Mode, ParamStore, Tensor, Var};

use super::{argmax_rows, check_labels, Predictor};
use crate::codec::LatentCode;
use crate::error::{Error, Result};
use crate::trace::LossTrace;
use crate::vae::Trained;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseClassifierConfig {
    /// Fully connected layers including the output layer, 1 to 3.
    pub n_layers: usize,
    pub hidden_width: usize,
    pub use_relu: bool,
    pub use_batchnorm: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without a 1e-4 relative drop in training loss before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for DenseClassifierConfig {
    fn default() -> Self {
        DenseClassifierConfig {
            n_layers: 3,
            hidden_width: 128,
            use_relu: true,
            use_batchnorm: false,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            patience: 10,
            seed: 0,
        }
    }
}

impl DenseClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n_layers) {
            return Err(Error::Range { field: "n_layers", msg: format!("must be 1, 2 or 3, got {}", self.n_layers) });
        }
        if self.hidden_width == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("hidden_width, batch_size and epochs must be positive"));
        }
        Ok(())
    }
}

/// Dense head over standardized feature vectors.
#[derive(Clone, Debug)]
pub struct DenseClassifier {
    pub config: DenseClassifierConfig,
    pub n_classes: usize,
    pub params: ParamStore<f32>,
    layers: Vec<Linear>,
    norms: Vec<BatchNorm>,
    mean: Vec<f32>,
    scale: Vec<f32>,
}

impl DenseClassifier {
    fn new(cfg: &DenseClassifierConfig, input_len: usize, n_classes: usize, mean: Vec<f32>, scale: Vec<f32>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut c = input_len;
        for i in 0..cfg.n_layers {
            let last = i + 1 == cfg.n_layers;
            let o = if last { n_classes } else { cfg.hidden_width };
            layers.push(Linear::new(&mut params, &format!("fc{i}"), c, o, &mut rng));
            if !last && cfg.use_batchnorm {
                norms.push(BatchNorm::new(&mut params, &format!("bn{i}"), o, 0.9, 1e-5));
            }
            c = o;
        }
        DenseClassifier { config: cfg.clone(), n_classes, params, layers, norms, mean, scale }
    }

    pub fn input_len(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, rows: &[&[f32]]) -> Tensor<f32> {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            data.extend(r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s));
        }
        Tensor::new(&[rows.len(), d], data)
    }

    fn forward(&self, g: &mut Graph<f32>, x: Var, mode: Mode) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, &self.params, h);
            if i + 1 < self.layers.len() {
                if let Some(bn) = self.norms.get(i) {
                    h = bn.forward(g, &self.params, h, mode);
                }
                if self.config.use_relu {
                    h = g.relu(h);
                }
            }
        }
        h
    }

    pub fn logits(&self, rows: &[&[f32]]) -> Tensor<f32> {
        let mut g = Graph::new();
        let x = g.input(self.standardize(rows));
        let y = self.forward(&mut g, x, Mode::Eval);
        g.value(y).clone()
    }

    pub fn predict_rows(&self, rows: &[&[f32]]) -> Vec<usize> {
        argmax_rows(&self.logits(rows))
    }
}

impl Predictor<LatentCode> for DenseClassifier {
    fn predict(&self, xs: &[&LatentCode]) -> Vec<usize> {
        let rows: Vec<&[f32]> = xs.iter().map(|c| c.payload.as_slice()).collect();
        self.predict_rows(&rows)
    }
}

/// Trains on raw feature rows; see [`train_dense`] for latent codes.
pub fn train_dense_rows(rows: &[&[f32]], labels: &[usize], n_classes: usize, cfg: &DenseClassifierConfig) -> Result<Trained<DenseClassifier>> {
    cfg.validate()?;
    check_labels(rows.len(), labels, n_classes)?;
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::dims("feature row", d, r.len()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(*r) {
            *m += v as f64 / n;
        }
    }
    let mut var = vec![0.0f64; d];
    for r in rows {
        for ((s, &v), m) in var.iter_mut().zip(*r).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    let scale = var.iter().map(|v| (1.0 / v.sqrt().max(1e-6)) as f32).collect();
    let mut model = DenseClassifier::new(cfg, d, n_classes, mean.iter().map(|&m| m as f32).collect(), scale);
    let x_all = model.standardize(rows);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut trace = LossTrace::new(&["loss"]);
    let (mut best, mut stale) = (f64::INFINITY, 0);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            // batch norm needs at least two rows
            if cfg.use_batchnorm && chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let x = g.input(x_all.select_rows(chunk));
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = model.forward(&mut g, x, Mode::Train);
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
        let mean_loss = sum / batches.max(1) as f64;
        trace.push(vec![mean_loss]);
        if mean_loss < best * (1.0 - 1e-4) {
            best = mean_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(Trained { model, trace })
}

/// Trains a dense classifier on latent-code payloads.
pub fn train_dense(codes: &[LatentCode], labels: &[usize], n_classes: usize, cfg: &DenseClassifierConfig) -> Result<Trained<DenseClassifier>> {
    let first = codes.first().ok_or(Error::Empty("code set"))?;
    for c in codes {
        if c.mode != first.mode {
            return Err(Error::config(format!("mixed latent modes {:?} and {:?}", first.mode, c.mode)));
        }
        if c.payload.len() != first.payload.len() {
            return Err(Error::dims("payload length", first.payload.len(), c.payload.len()));
        }
    }
    let rows: Vec<&[f32]> = codes.iter().map(|c| c.payload.as_slice()).collect();
    train_dense_rows(&rows, labels, n_classes, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LatentMode;
    use crate::synth::Dims;
    use rand::Rng;

    fn code(v: Vec<f32>) -> LatentCode {
        LatentCode { payload: v, mode: LatentMode::Mu, source_dims: Dims::DESK, model_id: 0 }
    }

    #[test]
    fn separable_two_class_reaches_full_training_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut codes = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let y = i % 2;
            let shift = if y == 0 { -2.0 } else { 2.0 };
            codes.push(code(vec![shift + rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0)]));
            labels.push(y);
        }
        let cfg = DenseClassifierConfig { n_layers: 1, ..Default::default() };
        let m = train_dense(&codes, &labels, 2, &cfg).unwrap().model;
        let refs: Vec<&LatentCode> = codes.iter().collect();
        assert_eq!(m.predict(&refs), labels);
    }

    #[test]
    fn rejections() {
        let a = code(vec![1.0, 2.0]);
        let b = code(vec![1.0]);
        let cfg = DenseClassifierConfig::default();
        assert!(train_dense(&[a.clone(), b], &[0, 1], 2, &cfg).is_err());
        assert!(train_dense(&[a.clone(), a.clone()], &[0, 0], 2, &cfg).is_err());
        assert!(train_dense(&[], &[], 2, &cfg).is_err());
        assert!(DenseClassifierConfig { n_layers: 4, ..cfg }.validate().is_err());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let codes: Vec<LatentCode> = (0..90).map(|_| code((0..4).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let labels: Vec<usize> = (0..90).map(|i| i % 3).collect();
        let cfg = DenseClassifierConfig { epochs: 5, use_batchnorm: true, ..Default::default() };
        let a = train_dense(&codes, &labels, 3, &cfg).unwrap();
        let b = train_dense(&codes, &labels, 3, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model.params.to_f32_blocks(), b.model.params.to_f32_blocks());
    }
}
