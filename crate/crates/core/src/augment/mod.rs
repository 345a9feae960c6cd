//! Latent interpolation between generative-factor levels, INR histograms
//! and latent traversals.

mod experiment;
mod inr;

pub use experiment::{augment_eval, AugmentEvalConfig, AugmentEvalOutput, AugmentEvalReport, Backbone, PowerClassifier, TrainedBackbone};
pub use inr::{inr_histogram, InrHistogram, INR_BINS};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cvae_gan::CvaeGanModel;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::synth::{Dims, InterferenceClass, InterferenceRecord, Provenance, Sample, Spectrogram};
use crate::vae::{LatentParams, VaeModel};

/// `(1 - alpha) * z1 + alpha * z2`.
pub fn interpolate_latent(z1: &[f64], z2: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z1.len() != z2.len() {
        return Err(Error::dims("interpolation endpoint", z1.len(), z2.len()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range { field: "alpha", msg: format!("{alpha} not in [0, 1]") });
    }
    Ok(z1.iter().zip(z2).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect())
}

/// Encoder/decoder pair usable for augmentation. Unconditional models ignore
/// the class argument.
pub trait LatentModel: Sync {
    fn dims(&self) -> Dims;
    fn latent_dim(&self) -> usize;
    fn encode_as(&self, xs: &[&Spectrogram], classes: &[InterferenceClass], exec: Exec) -> Result<Vec<LatentParams>>;
    fn decode_as(&self, zs: &[Vec<f64>], classes: &[InterferenceClass], exec: Exec) -> Result<Vec<Spectrogram>>;
}

impl LatentModel for VaeModel {
    fn dims(&self) -> Dims {
        VaeModel::dims(self)
    }

    fn latent_dim(&self) -> usize {
        VaeModel::latent_dim(self)
    }

    fn encode_as(&self, xs: &[&Spectrogram], _: &[InterferenceClass], exec: Exec) -> Result<Vec<LatentParams>> {
        self.encode(xs, exec)
    }

    fn decode_as(&self, zs: &[Vec<f64>], _: &[InterferenceClass], exec: Exec) -> Result<Vec<Spectrogram>> {
        self.decode(zs, exec)
    }
}

/// Conditional label index: position in [`InterferenceClass::ALL`].
pub fn class_index(c: InterferenceClass) -> usize {
    InterferenceClass::ALL.iter().position(|&k| k == c).unwrap_or(0)
}

impl LatentModel for CvaeGanModel {
    fn dims(&self) -> Dims {
        CvaeGanModel::dims(self)
    }

    fn latent_dim(&self) -> usize {
        CvaeGanModel::latent_dim(self)
    }

    fn encode_as(&self, xs: &[&Spectrogram], classes: &[InterferenceClass], exec: Exec) -> Result<Vec<LatentParams>> {
        let ys: Vec<usize> = classes.iter().map(|&c| class_index(c)).collect();
        self.cond_encode(xs, &ys, exec)
    }

    fn decode_as(&self, zs: &[Vec<f64>], classes: &[InterferenceClass], exec: Exec) -> Result<Vec<Spectrogram>> {
        let ys: Vec<usize> = classes.iter().map(|&c| class_index(c)).collect();
        self.generate(zs, &ys, exec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Power,
    Bandwidth,
    Distance,
}

impl Factor {
    pub fn name(self) -> &'static str {
        match self {
            Factor::Power => "power_db",
            Factor::Bandwidth => "bandwidth",
            Factor::Distance => "distance_m",
        }
    }

    pub fn get(self, r: &InterferenceRecord) -> f64 {
        match self {
            Factor::Power => r.power_db,
            Factor::Bandwidth => r.bandwidth,
            Factor::Distance => r.distance_m,
        }
    }

    fn set(self, r: &mut InterferenceRecord, v: f64) {
        match self {
            Factor::Power => r.power_db = v,
            Factor::Bandwidth => r.bandwidth = v,
            Factor::Distance => r.distance_m = v,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipPattern {
    #[default]
    All,
    /// Keeps steps 0, 2, 4, ...
    EverySecond,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolationSpec {
    pub factor: Factor,
    pub lo: f64,
    pub hi: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub skip_pattern: SkipPattern,
    /// Pair endpoints within each class; otherwise across the whole pool.
    #[serde(default = "yes")]
    pub per_class: bool,
    /// Endpoint pairs per class; `None` uses the smaller endpoint cell.
    #[serde(default)]
    pub pairs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

/// Relative tolerance when matching factor values to endpoint cells.
const MATCH_TOL: f64 = 1e-6;

impl InterpolationSpec {
    pub fn power(lo: f64, hi: f64, n_steps: usize) -> Self {
        InterpolationSpec { factor: Factor::Power, lo, hi, n_steps, skip_pattern: SkipPattern::All, per_class: true, pairs: None, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::Range { field: "lo/hi", msg: format!("need lo < hi, got {} and {}", self.lo, self.hi) });
        }
        if self.n_steps < 2 {
            return Err(Error::Range { field: "n_steps", msg: format!("must be at least 2, got {}", self.n_steps) });
        }
        if self.pairs == Some(0) {
            return Err(Error::Range { field: "pairs", msg: "must be at least 1".into() });
        }
        Ok(())
    }

    /// Interpolation positions after the skip pattern.
    pub fn alphas(&self) -> Vec<f64> {
        let last = (self.n_steps - 1) as f64;
        (0..self.n_steps)
            .filter(|k| self.skip_pattern == SkipPattern::All || k % 2 == 0)
            .map(|k| k as f64 / last)
            .collect()
    }

    fn matches(&self, v: f64, target: f64) -> bool {
        (v - target).abs() <= MATCH_TOL * (1.0 + target.abs())
    }
}

/// Decodes interpolated posterior means between samples at `spec.lo` and
/// `spec.hi`. Labels carry the interpolated factor value; other fields are
/// copied from the low endpoint. Output is grouped by class, pair, step.
pub fn augment_power_bins<M: LatentModel>(model: &M, dataset: &[Sample], spec: &InterpolationSpec, exec: Exec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut cells: BTreeMap<Option<InterferenceClass>, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        let key = spec.per_class.then_some(s.record.class);
        let v = spec.factor.get(&s.record);
        let cell = cells.entry(key).or_default();
        if spec.matches(v, spec.lo) {
            cell.0.push(i);
        } else if spec.matches(v, spec.hi) {
            cell.1.push(i);
        }
    }
    if cells.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (key, (mut lo, mut hi)) in cells {
        let class = key.map(|c| c.to_string()).unwrap_or_else(|| "any".into());
        for (cell, value) in [(&lo, spec.lo), (&hi, spec.hi)] {
            if cell.is_empty() {
                return Err(Error::MissingEndpoint { class, factor: spec.factor.name(), value });
            }
        }
        lo.shuffle(&mut rng);
        hi.shuffle(&mut rng);
        let n = spec.pairs.unwrap_or(lo.len().min(hi.len()));
        pairs.extend((0..n).map(|p| (lo[p % lo.len()], hi[p % hi.len()])));
    }
    let a: Vec<&Spectrogram> = pairs.iter().map(|&(i, _)| &dataset[i].spectrogram).collect();
    let b: Vec<&Spectrogram> = pairs.iter().map(|&(_, j)| &dataset[j].spectrogram).collect();
    let classes: Vec<InterferenceClass> = pairs.iter().map(|&(i, _)| dataset[i].record.class).collect();
    let za = model.encode_as(&a, &classes, exec)?;
    let zb = model.encode_as(&b, &classes, exec)?;
    let alphas = spec.alphas();
    let mut zs = Vec::with_capacity(pairs.len() * alphas.len());
    let mut records = Vec::with_capacity(zs.capacity());
    let mut out_classes = Vec::with_capacity(zs.capacity());
    for (p, &(i, j)) in pairs.iter().enumerate() {
        for &alpha in &alphas {
            zs.push(interpolate_latent(&za[p].mu, &zb[p].mu, alpha)?);
            let mut r = dataset[i].record.clone();
            spec.factor.set(&mut r, (1.0 - alpha) * spec.lo + alpha * spec.hi);
            r.seed = dataset[i].record.seed ^ dataset[j].record.seed.rotate_left(32) ^ alpha.to_bits();
            r.provenance = Provenance::Interpolated;
            out_classes.push(r.class);
            records.push(r);
        }
    }
    let specs = model.decode_as(&zs, &out_classes, exec)?;
    Ok(specs.into_iter().zip(records).map(|(spectrogram, record)| Sample { spectrogram, record }).collect())
}

/// Encodes `x` to its posterior mean, overwrites coordinate `dim` with each
/// value and decodes.
pub fn latent_traversal<M: LatentModel>(
    model: &M,
    x: &Spectrogram,
    class: InterferenceClass,
    dim: usize,
    values: &[f64],
    exec: Exec,
) -> Result<Vec<Spectrogram>> {
    let d = model.latent_dim();
    if dim >= d {
        return Err(Error::Range { field: "dim_index", msg: format!("{dim} >= latent dim {d}") });
    }
    let mu = model.encode_as(&[x], &[class], exec)?.remove(0).mu;
    let zs: Vec<Vec<f64>> = values
        .iter()
        .map(|&v| {
            let mut z = mu.clone();
            z[dim] = v;
            z
        })
        .collect();
    model.decode_as(&zs, &vec![class; values.len()], exec)
}

/// Relative change of interference-region energy when each latent
/// coordinate is swept from `lo` to `hi`, averaged over the inputs.
///
/// The region is the upper Otsu population of each input.
pub fn traversal_sensitivity<M: LatentModel>(
    model: &M,
    xs: &[&Spectrogram],
    classes: &[InterferenceClass],
    lo: f64,
    hi: f64,
    exec: Exec,
) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Empty("traversal inputs"));
    }
    let d = model.latent_dim();
    let params = model.encode_as(xs, classes, exec)?;
    let mut zs = Vec::with_capacity(xs.len() * (2 * d + 1));
    let mut cls = Vec::with_capacity(zs.capacity());
    for (p, &c) in params.iter().zip(classes) {
        zs.push(p.mu.clone());
        for j in 0..d {
            for v in [lo, hi] {
                let mut z = p.mu.clone();
                z[j] = v;
                zs.push(z);
            }
        }
        cls.extend(std::iter::repeat_n(c, 2 * d + 1));
    }
    let decoded = model.decode_as(&zs, &cls, exec)?;
    let mut out = vec![0.0; d];
    for (i, x) in xs.iter().enumerate() {
        let h = inr_histogram(x);
        let mask: Vec<bool> = x.data.iter().map(|&v| h.single_population || v as f64 >= h.threshold).collect();
        let energy = |s: &Spectrogram| -> f64 { s.data.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64).sum() };
        let base = &decoded[i * (2 * d + 1)..(i + 1) * (2 * d + 1)];
        let e0 = energy(&base[0]).max(1e-9);
        for j in 0..d {
            out[j] += (energy(&base[1 + 2 * j + 1]) - energy(&base[1 + 2 * j])).abs() / e0 / xs.len() as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::VaeArch;
    use proptest::prelude::*;

    #[test]
    fn interpolation_examples() {
        assert_eq!(interpolate_latent(&[0.0, 0.0], &[2.0, 4.0], 0.5).unwrap(), vec![1.0, 2.0]);
        assert_eq!(interpolate_latent(&[0.3, -1.0], &[2.0, 4.0], 0.0).unwrap(), vec![0.3, -1.0]);
        assert_eq!(interpolate_latent(&[0.3, -1.0], &[2.0, 4.0], 1.0).unwrap(), vec![2.0, 4.0]);
        assert!(interpolate_latent(&[0.0], &[1.0], 1.5).is_err());
        assert!(interpolate_latent(&[0.0], &[1.0, 2.0], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn interpolation_is_affine(
            z in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..8),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let (z1, z2): (Vec<f64>, Vec<f64>) = z.into_iter().unzip();
            let za = interpolate_latent(&z1, &z2, a).unwrap();
            let zb = interpolate_latent(&z1, &z2, b).unwrap();
            let t = 0.5;
            let mid = interpolate_latent(&z1, &z2, t * a + (1.0 - t) * b).unwrap();
            for i in 0..z1.len() {
                prop_assert!((mid[i] - (t * za[i] + (1.0 - t) * zb[i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn alphas_and_skip_pattern() {
        let mut s = InterpolationSpec::power(-20.0, -16.0, 5);
        assert_eq!(s.alphas(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        s.skip_pattern = SkipPattern::EverySecond;
        assert_eq!(s.alphas(), vec![0.0, 0.5, 1.0]);
        assert!(InterpolationSpec::power(-10.0, -20.0, 5).validate().is_err());
        assert!(InterpolationSpec::power(-20.0, -10.0, 1).validate().is_err());
    }

    fn tiny_model() -> VaeModel {
        let arch = VaeArch { dims: Dims::new(16, 16), channels: vec![4, 8], disc_width: 8, disc_layers: 2, ..VaeArch::desk(3) };
        VaeModel::new(arch, 1.0, 0.0, 4).unwrap()
    }

    fn samples() -> Vec<Sample> {
        let mut cfg = crate::synth::DatasetConfig::desk(2);
        cfg.dims = Dims::new(16, 16);
        cfg.n_per_class = 2;
        cfg.class_set = vec![InterferenceClass::Tone, InterferenceClass::Chirp];
        cfg.power_bins = vec![-20.0, -16.0];
        crate::synth::make_dataset(&cfg, Exec::Parallel).unwrap()
    }

    #[test]
    fn output_count_labels_and_endpoints() {
        let m = tiny_model();
        let data = samples();
        let spec = InterpolationSpec::power(-20.0, -16.0, 5);
        let out = augment_power_bins(&m, &data, &spec, Exec::Parallel).unwrap();
        assert_eq!(out.len(), 2 * 2 * 5);
        assert!(out.iter().all(|s| s.record.provenance == Provenance::Interpolated));
        let powers: Vec<f64> = out[..5].iter().map(|s| s.record.power_db).collect();
        assert_eq!(powers, vec![-20.0, -19.0, -18.0, -17.0, -16.0]);
        let two = augment_power_bins(&m, &data, &InterpolationSpec::power(-20.0, -16.0, 2), Exec::Parallel).unwrap();
        let endpoints: Vec<&Spectrogram> = data.iter().filter(|s| s.record.power_db == -20.0).map(|s| &s.spectrogram).collect();
        let recon = m.reconstruct(&endpoints, Exec::Parallel).unwrap();
        assert!(recon.contains(&two[0].spectrogram));
        assert_eq!(out, augment_power_bins(&m, &data, &spec, Exec::Sequential).unwrap());
    }

    #[test]
    fn missing_endpoint_names_the_class() {
        let m = tiny_model();
        let data: Vec<Sample> = samples().into_iter().filter(|s| !(s.record.class == InterferenceClass::Chirp && s.record.power_db == -16.0)).collect();
        let err = augment_power_bins(&m, &data, &InterpolationSpec::power(-20.0, -16.0, 3), Exec::Parallel).unwrap_err();
        assert!(matches!(&err, Error::MissingEndpoint { class, .. } if class == "chirp"), "{err}");
    }

    #[test]
    fn traversal_shapes_and_identity() {
        let m = tiny_model();
        let data = samples();
        let x = &data[0].spectrogram;
        let mu = m.encode(&[x], Exec::Parallel).unwrap()[0].mu.clone();
        let id = latent_traversal(&m, x, InterferenceClass::Tone, 1, &[mu[1]], Exec::Parallel).unwrap();
        assert_eq!(id[0], m.reconstruct(&[x], Exec::Parallel).unwrap()[0]);
        let values: Vec<f64> = (0..7).map(|i| -3.0 + i as f64).collect();
        let t = latent_traversal(&m, x, InterferenceClass::Tone, 2, &values, Exec::Parallel).unwrap();
        assert_eq!(t.len(), 7);
        assert!(t.iter().all(|s| s.data.iter().all(|v| v.is_finite())));
        assert!(latent_traversal(&m, x, InterferenceClass::Tone, 3, &values, Exec::Parallel).is_err());
        let xs: Vec<&Spectrogram> = data.iter().map(|s| &s.spectrogram).collect();
        let cls: Vec<InterferenceClass> = data.iter().map(|s| s.record.class).collect();
        let sens = traversal_sensitivity(&m, &xs, &cls, -3.0, 3.0, Exec::Parallel).unwrap();
        assert_eq!(sens.len(), 3);
        assert!(sens.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
