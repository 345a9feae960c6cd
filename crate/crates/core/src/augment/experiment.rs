use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{augment_power_bins, class_index, InterpolationSpec, LatentModel, SkipPattern};
use crate::classifier::{evaluate, train_baseline_cnn, train_dense_rows, CnnConfig, DenseClassifier, DenseClassifierConfig, EvalReport, Predictor};
use crate::cvae_gan::{train_cvae_gan, CvaeGanArch, CvaeGanConfig, CvaeGanModel};
use crate::dataset::{nearest_bin, stratified_split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::synth::{make_dataset, DatasetConfig, Dims, InterferenceClass, Sample, Spectrogram};
use crate::trace::LossTrace;
use crate::vae::{train_factorvae, LatentParams, TrainConfig, VaeArch, VaeModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Factorvae,
    Vae,
    CvaeGan,
}

pub enum TrainedBackbone {
    Vae(VaeModel),
    CvaeGan(CvaeGanModel),
}

impl TrainedBackbone {
    pub fn train(kind: Backbone, data: &[&Sample], dims: Dims, latent_dim: usize, vae: &TrainConfig, cvae: &CvaeGanConfig) -> Result<(Self, LossTrace)> {
        let xs: Vec<&Spectrogram> = data.iter().map(|s| &s.spectrogram).collect();
        match kind {
            Backbone::Factorvae | Backbone::Vae => {
                let cfg = if kind == Backbone::Vae { TrainConfig { gamma: 0.0, ..vae.clone() } } else { vae.clone() };
                let arch = VaeArch { dims, ..VaeArch::desk(latent_dim) };
                let t = train_factorvae::<f32>(&xs, &arch, &cfg)?;
                Ok((TrainedBackbone::Vae(t.model), t.trace))
            }
            Backbone::CvaeGan => {
                let arch = CvaeGanArch { dims, ..CvaeGanArch::desk(latent_dim, InterferenceClass::ALL.len()) };
                let ys: Vec<usize> = data.iter().map(|s| class_index(s.record.class)).collect();
                let t = train_cvae_gan(&xs, &ys, &arch, cvae)?;
                Ok((TrainedBackbone::CvaeGan(t.model), t.trace))
            }
        }
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        match self {
            TrainedBackbone::Vae(m) => m.to_checkpoint(),
            TrainedBackbone::CvaeGan(m) => m.to_checkpoint(),
        }
    }
}

impl LatentModel for TrainedBackbone {
    fn dims(&self) -> Dims {
        match self {
            TrainedBackbone::Vae(m) => m.dims(),
            TrainedBackbone::CvaeGan(m) => m.dims(),
        }
    }

    fn latent_dim(&self) -> usize {
        match self {
            TrainedBackbone::Vae(m) => m.latent_dim(),
            TrainedBackbone::CvaeGan(m) => m.latent_dim(),
        }
    }

    fn encode_as(&self, xs: &[&Spectrogram], classes: &[InterferenceClass], exec: Exec) -> Result<Vec<LatentParams>> {
        match self {
            TrainedBackbone::Vae(m) => m.encode_as(xs, classes, exec),
            TrainedBackbone::CvaeGan(m) => m.encode_as(xs, classes, exec),
        }
    }

    fn decode_as(&self, zs: &[Vec<f64>], classes: &[InterferenceClass], exec: Exec) -> Result<Vec<Spectrogram>> {
        match self {
            TrainedBackbone::Vae(m) => m.decode_as(zs, classes, exec),
            TrainedBackbone::CvaeGan(m) => m.decode_as(zs, classes, exec),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerClassifier {
    /// Residual CNN on raw pixels.
    #[default]
    Cnn,
    /// Backbone encoder means fed to a dense head.
    Latent,
}

/// Power-level classification trained on sparse bins, with and without
/// interpolated intermediate samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentEvalConfig {
    /// Its `power_bins` form the evaluation grid and the label space.
    pub dataset: DatasetConfig,
    pub train_bins: Vec<f64>,
    pub test_fraction: f64,
    pub backbone: Backbone,
    pub latent_dim: usize,
    pub vae: TrainConfig,
    pub cvae_gan: CvaeGanConfig,
    pub n_steps: usize,
    pub skip_pattern: SkipPattern,
    pub pairs: Option<usize>,
    pub classifier: PowerClassifier,
    pub cnn: CnnConfig,
    pub dense: DenseClassifierConfig,
    pub seed: u64,
}

impl Default for AugmentEvalConfig {
    fn default() -> Self {
        let mut dataset = DatasetConfig::desk(0);
        dataset.class_set.retain(|&c| c != InterferenceClass::Noise);
        dataset.power_bins = vec![-20.0, -15.0, -10.0, -5.0, 0.0];
        AugmentEvalConfig {
            dataset,
            train_bins: vec![-20.0, -10.0, 0.0],
            test_fraction: 0.2,
            backbone: Backbone::Factorvae,
            latent_dim: 16,
            vae: TrainConfig::desk(),
            cvae_gan: CvaeGanConfig::default(),
            n_steps: 3,
            skip_pattern: SkipPattern::All,
            pairs: None,
            classifier: PowerClassifier::Cnn,
            cnn: CnnConfig { epochs: 30, ..CnnConfig::default() },
            dense: DenseClassifierConfig::default(),
            seed: 0,
        }
    }
}

impl AugmentEvalConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.rng_seed = seed;
        self.vae.seed = seed;
        self.cvae_gan.seed = seed;
        self.cnn.seed = seed;
        self.dense.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.train_bins.len() < 2 {
            return Err(Error::Range { field: "train_bins", msg: "need at least 2 bins to interpolate between".into() });
        }
        if self.train_bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Range { field: "train_bins", msg: "must be strictly ascending".into() });
        }
        if let Some(b) = self.train_bins.iter().find(|b| !self.dataset.power_bins.contains(b)) {
            return Err(Error::Range { field: "train_bins", msg: format!("{b} is not on the evaluation grid") });
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Range { field: "test_fraction", msg: format!("{} not in (0, 1)", self.test_fraction) });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentEvalReport {
    pub eval_bins: Vec<f64>,
    pub train_bins: Vec<f64>,
    pub heldout_bins: Vec<f64>,
    pub without: EvalReport,
    pub with: EvalReport,
    /// `None` when every evaluation bin was trained on.
    pub heldout_accuracy_without: Option<f64>,
    pub heldout_accuracy_with: Option<f64>,
    pub delta: f64,
    /// Share of misclassified held-out samples that land on a neighbouring bin.
    pub adjacent_error_fraction_with: f64,
    pub n_train: usize,
    pub n_augmented: usize,
    pub backbone_train_time_s: f64,
}

impl AugmentEvalReport {
    pub fn without_timings(&self) -> Self {
        AugmentEvalReport {
            without: self.without.without_timings(),
            with: self.with.without_timings(),
            backbone_train_time_s: 0.0,
            ..self.clone()
        }
    }
}

pub struct AugmentEvalOutput {
    pub report: AugmentEvalReport,
    pub augmented: Vec<Sample>,
    pub backbone: TrainedBackbone,
}

fn encode_rows(backbone: &TrainedBackbone, data: &[&Sample], exec: Exec) -> Result<Vec<Vec<f32>>> {
    let xs: Vec<&Spectrogram> = data.iter().map(|s| &s.spectrogram).collect();
    let cls: Vec<InterferenceClass> = data.iter().map(|s| s.record.class).collect();
    let p = backbone.encode_as(&xs, &cls, exec)?;
    Ok(p.into_iter().map(|p| p.mu.into_iter().map(|v| v as f32).collect()).collect())
}

struct EncodedHead<'a> {
    backbone: &'a TrainedBackbone,
    dense: &'a DenseClassifier,
}

impl Predictor<Sample> for EncodedHead<'_> {
    fn predict(&self, xs: &[&Sample]) -> Vec<usize> {
        let rows = encode_rows(self.backbone, xs, Exec::Sequential).expect("inputs match the backbone");
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        self.dense.predict_rows(&refs)
    }
}

fn adjacent_fraction(r: &EvalReport, heldout: &[usize]) -> f64 {
    let (mut near, mut wrong) = (0u64, 0u64);
    for &k in heldout {
        for (p, &c) in r.confusion[k].iter().enumerate() {
            if p != k {
                wrong += c;
                if p.abs_diff(k) == 1 {
                    near += c;
                }
            }
        }
    }
    if wrong == 0 {
        1.0
    } else {
        near as f64 / wrong as f64
    }
}

pub fn augment_eval(cfg: &AugmentEvalConfig, exec: Exec) -> Result<AugmentEvalOutput> {
    cfg.validate()?;
    let grid = &cfg.dataset.power_bins;
    let samples = make_dataset(&cfg.dataset, exec)?;
    let (train_idx, test_idx) = stratified_split(&samples, cfg.test_fraction, cfg.seed);
    let on_train_bin = |s: &Sample| cfg.train_bins.iter().any(|&b| (b - s.record.power_db).abs() < 1e-9);
    let train: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).filter(|s| on_train_bin(s)).collect();
    let test: Vec<&Sample> = test_idx.iter().map(|&i| &samples[i]).collect();
    let label = |s: &Sample| nearest_bin(s.record.power_db, grid);

    let t = Instant::now();
    let (backbone, _) = TrainedBackbone::train(cfg.backbone, &train, cfg.dataset.dims, cfg.latent_dim, &cfg.vae, &cfg.cvae_gan)?;
    let backbone_train_time_s = t.elapsed().as_secs_f64();
    let owned: Vec<Sample> = train.iter().map(|&s| s.clone()).collect();
    let mut augmented = Vec::new();
    for (k, w) in cfg.train_bins.windows(2).enumerate() {
        let spec = InterpolationSpec {
            skip_pattern: cfg.skip_pattern,
            pairs: cfg.pairs,
            seed: cfg.seed.wrapping_add(k as u64),
            ..InterpolationSpec::power(w[0], w[1], cfg.n_steps)
        };
        augmented.extend(augment_power_bins(&backbone, &owned, &spec, exec)?);
    }

    let n_classes = grid.len();
    let test_x: Vec<&Spectrogram> = test.iter().map(|s| &s.spectrogram).collect();
    let test_y: Vec<usize> = test.iter().map(|s| label(s)).collect();
    let mut both = train.clone();
    both.extend(augmented.iter());
    let mut reports = Vec::new();
    for data in [&train, &both] {
        let xs: Vec<&Spectrogram> = data.iter().map(|s| &s.spectrogram).collect();
        let ys: Vec<usize> = data.iter().map(|s| label(s)).collect();
        let t = Instant::now();
        let mut r = match cfg.classifier {
            PowerClassifier::Cnn => {
                let m = train_baseline_cnn(&xs, &ys, n_classes, &cfg.cnn)?.model;
                let fit_s = t.elapsed().as_secs_f64();
                let mut r = evaluate(&m, &test_x, &test_y, n_classes, 0)?;
                r.train_time_s = fit_s;
                r
            }
            PowerClassifier::Latent => {
                let rows = encode_rows(&backbone, data, exec)?;
                let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
                let dense = train_dense_rows(&refs, &ys, n_classes, &cfg.dense)?.model;
                let fit_s = t.elapsed().as_secs_f64();
                let m = EncodedHead { backbone: &backbone, dense: &dense };
                let mut r = evaluate(&m, &test, &test_y, n_classes, 0)?;
                r.train_time_s = fit_s;
                r
            }
        };
        r.n_classes = n_classes;
        reports.push(r);
    }
    let with = reports.pop().expect("two reports");
    let without = reports.pop().expect("two reports");

    let heldout: Vec<usize> = (0..n_classes).filter(|&k| !cfg.train_bins.contains(&grid[k])).collect();
    let (acc0, acc1) = if heldout.is_empty() { (None, None) } else { (Some(without.accuracy_on(&heldout)), Some(with.accuracy_on(&heldout))) };
    let report = AugmentEvalReport {
        eval_bins: grid.clone(),
        train_bins: cfg.train_bins.clone(),
        heldout_bins: heldout.iter().map(|&k| grid[k]).collect(),
        heldout_accuracy_without: acc0,
        heldout_accuracy_with: acc1,
        delta: acc1.zip(acc0).map(|(a, b)| a - b).unwrap_or(0.0),
        adjacent_error_fraction_with: adjacent_fraction(&with, &heldout),
        n_train: train.len(),
        n_augmented: augmented.len(),
        backbone_train_time_s,
        without,
        with,
    };
    Ok(AugmentEvalOutput { report, augmented, backbone })
}
