//! Parametric generator of labeled interference spectrograms.
//!
//! Background is Gaussian noise in dB around a noise floor. Interference adds
//! `gain * inr_db` on top, where `gain` in `[0, 1]` is a class-specific
//! time/frequency template and `inr_db` follows the record's power and a
//! free-space (inverse-square) distance loss. Values are min-max normalized
//! with dataset-wide bounds so absolute power survives normalization.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

pub const MIN_POWER_DB: f64 = -20.0;
pub const MAX_POWER_DB: f64 = 10.0;
pub const MIN_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterferenceClass {
    Noise,
    Tone,
    Chirp,
    Pulsed,
    WidebandNoise,
    Multitone,
}

impl InterferenceClass {
    pub const ALL: [InterferenceClass; 6] = [
        InterferenceClass::Noise,
        InterferenceClass::Tone,
        InterferenceClass::Chirp,
        InterferenceClass::Pulsed,
        InterferenceClass::WidebandNoise,
        InterferenceClass::Multitone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InterferenceClass::Noise => "noise",
            InterferenceClass::Tone => "tone",
            InterferenceClass::Chirp => "chirp",
            InterferenceClass::Pulsed => "pulsed",
            InterferenceClass::WidebandNoise => "wideband-noise",
            InterferenceClass::Multitone => "multitone",
        }
    }
}

impl fmt::Display for InterferenceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InterferenceClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        InterferenceClass::ALL
            .into_iter()
            .find(|c| c.name() == key || (key == "wideband" && *c == InterferenceClass::WidebandNoise))
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

/// Parses a comma separated class list such as `tone,chirp`.
pub fn parse_class_list(s: &str) -> Result<Vec<InterferenceClass>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    #[default]
    Synthetic,
    Interpolated,
}

/// Generative factors of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferenceRecord {
    pub class: InterferenceClass,
    pub power_db: f64,
    /// Fraction of the band occupied by the interference.
    pub bandwidth: f64,
    pub distance_m: f64,
    pub seed: u64,
    #[serde(default)]
    pub provenance: Provenance,
}

impl InterferenceRecord {
    pub fn new(class: InterferenceClass, power_db: f64, seed: u64) -> Self {
        InterferenceRecord { class, power_db, bandwidth: 0.04, distance_m: 0.0, seed, provenance: Provenance::Synthetic }
    }

    pub fn with_distance(mut self, distance_m: f64) -> Self {
        self.distance_m = distance_m;
        self
    }

    pub fn with_bandwidth(mut self, bandwidth: f64) -> Self {
        self.bandwidth = bandwidth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("power_db", self.power_db), ("bandwidth", self.bandwidth), ("distance_m", self.distance_m)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if !(MIN_POWER_DB..=MAX_POWER_DB).contains(&self.power_db) {
            return Err(Error::Range { field: "power_db", msg: format!("{} not in [-20, 10]", self.power_db) });
        }
        if !(self.bandwidth > 0.0 && self.bandwidth <= 1.0) {
            return Err(Error::Range { field: "bandwidth", msg: format!("{} not in (0, 1]", self.bandwidth) });
        }
        if self.distance_m < 0.0 {
            return Err(Error::Range { field: "distance_m", msg: format!("{} is negative", self.distance_m) });
        }
        Ok(())
    }
}

/// Spectrogram extent: frequency bins by time bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const DESK: Dims = Dims { height: 64, width: 64 };

    pub fn new(height: usize, width: usize) -> Self {
        Dims { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_DIM || self.width < MIN_DIM {
            return Err(Error::Range { field: "dims", msg: format!("{self} below minimum {MIN_DIM}x{MIN_DIM}") });
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

impl FromStr for Dims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::config(format!("dims `{s}` must look like 64x64")))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::config(format!("bad dims `{s}`")));
        Ok(Dims::new(parse(h)?, parse(w)?))
    }
}

impl Serialize for Dims {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Dims {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Row-major magnitude grid normalized to `[0, 1]`; rows are frequency bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Spectrogram {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims("spectrogram", height * width, data.len()));
        }
        Ok(Spectrogram { height, width, data })
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

/// Labeled dataset entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spectrogram: Spectrogram,
    pub record: InterferenceRecord,
}

/// Constants of the synthetic signal model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalModel {
    pub noise_floor_db: f64,
    pub noise_std_db: f64,
    /// Interference-to-noise ratio of a 0 dB source at unit distance.
    pub inr_offset_db: f64,
    /// Frequency sweeps of the chirp across one window.
    pub chirp_sweeps: f64,
    pub pulse_period_frac: f64,
    pub pulse_duty: f64,
    pub multitone_count: usize,
    /// Random offset of template rows, as a fraction of the band.
    pub jitter_frac: f64,
}

impl Default for SignalModel {
    fn default() -> Self {
        SignalModel {
            noise_floor_db: -100.0,
            noise_std_db: 2.0,
            inr_offset_db: 45.0,
            chirp_sweeps: 2.0,
            pulse_period_frac: 0.25,
            pulse_duty: 0.5,
            multitone_count: 3,
            jitter_frac: 1.0 / 32.0,
        }
    }
}

const GEOMETRY_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const TEXTURE_STREAM: u64 = 2;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

impl SignalModel {
    /// Lower normalization bound (dB).
    pub fn lo_db(&self) -> f64 {
        self.noise_floor_db - 4.0 * self.noise_std_db
    }

    /// Upper normalization bound (dB): strongest source at unit distance.
    pub fn hi_db(&self) -> f64 {
        self.noise_floor_db + MAX_POWER_DB + self.inr_offset_db + 4.0 * self.noise_std_db
    }

    /// Free-space loss relative to 1 m; distances below 1 m are not amplified.
    pub fn path_loss_db(distance_m: f64) -> f64 {
        20.0 * distance_m.max(1.0).log10()
    }

    /// Peak interference level above the noise floor, in dB.
    pub fn interference_level_db(&self, r: &InterferenceRecord) -> f64 {
        if r.class == InterferenceClass::Noise {
            return 0.0;
        }
        (r.power_db + self.inr_offset_db - Self::path_loss_db(r.distance_m)).max(0.0)
    }

    /// Class template in `[0, 1]`, row-major; all zero for pure noise.
    pub fn template(&self, r: &InterferenceRecord, dims: Dims) -> Vec<f64> {
        let (h, w) = (dims.height as f64, dims.width);
        let mut geo = stream(r.seed, GEOMETRY_STREAM);
        let jitter = geo.random_range(-1.0..=1.0) * self.jitter_frac * h;
        let sigma = (r.bandwidth * h / 2.0).max(0.5);
        let gauss = |d: f64| {
            let g = (-0.5 * (d / sigma).powi(2)).exp();
            if g < 1e-4 {
                0.0
            } else {
                g
            }
        };
        let mut out = vec![0.0f64; dims.len()];
        let mut set = |row: usize, col: usize, v: f64| {
            let cell = &mut out[row * w + col];
            *cell = (*cell).max(v);
        };
        match r.class {
            InterferenceClass::Noise => {}
            InterferenceClass::Tone => {
                let c = 0.30 * h + jitter;
                for row in 0..dims.height {
                    let g = gauss(row as f64 - c);
                    (0..w).for_each(|col| set(row, col, g));
                }
            }
            InterferenceClass::Multitone => {
                let k = self.multitone_count.max(1);
                for m in 0..k {
                    let c = (m + 1) as f64 / (k + 1) as f64 * h + jitter;
                    for row in 0..dims.height {
                        let g = gauss(row as f64 - c);
                        (0..w).for_each(|col| set(row, col, g));
                    }
                }
            }
            InterferenceClass::Chirp => {
                let phase = 0.1 * h + jitter;
                for col in 0..w {
                    let c = (phase + self.chirp_sweeps * h * col as f64 / w as f64).rem_euclid(h);
                    for row in 0..dims.height {
                        let d = (row as f64 - c).abs();
                        set(row, col, gauss(d.min(h - d)));
                    }
                }
            }
            InterferenceClass::Pulsed => {
                let c = 0.65 * h + jitter;
                let period = (self.pulse_period_frac * w as f64).max(2.0);
                let offset = geo.random_range(0.0..period);
                for col in 0..w {
                    if (col as f64 + offset).rem_euclid(period) >= self.pulse_duty * period {
                        continue;
                    }
                    for row in 0..dims.height {
                        set(row, col, gauss(row as f64 - c));
                    }
                }
            }
            InterferenceClass::WidebandNoise => {
                let c = 0.5 * h + jitter;
                let half = (r.bandwidth * h * 2.0).max(2.0);
                let mut tex = stream(r.seed, TEXTURE_STREAM);
                for row in 0..dims.height {
                    let d = ((row as f64 - c).abs() - half).max(0.0);
                    let base = (-0.5 * d * d).exp();
                    for col in 0..w {
                        let t: f64 = tex.random_range(0.75..=1.0);
                        set(row, col, if base < 1e-4 { 0.0 } else { base * t });
                    }
                }
            }
        }
        out
    }

    /// Unnormalized grid in dB.
    pub fn raw_db(&self, r: &InterferenceRecord, dims: Dims) -> Result<Vec<f64>> {
        dims.validate()?;
        r.validate()?;
        let inr = self.interference_level_db(r);
        let template = self.template(r, dims);
        let mut noise = stream(r.seed, NOISE_STREAM);
        Ok(template
            .iter()
            .map(|&g| self.noise_floor_db + self.noise_std_db * noise.sample::<f64, _>(StandardNormal) + g * inr)
            .collect())
    }

    pub fn normalize(&self, db: f64) -> f32 {
        ((db - self.lo_db()) / (self.hi_db() - self.lo_db())).clamp(0.0, 1.0) as f32
    }

    pub fn synth(&self, r: &InterferenceRecord, dims: Dims) -> Result<Spectrogram> {
        let raw = self.raw_db(r, dims)?;
        Spectrogram::new(dims.height, dims.width, raw.into_iter().map(|v| self.normalize(v)).collect())
    }
}

/// Generates one spectrogram with the default signal model.
pub fn synth_spectrogram(record: &InterferenceRecord, dims: Dims) -> Result<Spectrogram> {
    SignalModel::default().synth(record, dims)
}

/// Missing keys take their [`DatasetConfig::desk`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_per_class: usize,
    pub dims: Dims,
    pub class_set: Vec<InterferenceClass>,
    pub power_bins: Vec<f64>,
    pub noise_floor_db: f64,
    pub rng_seed: u64,
    pub bandwidth_range: (f64, f64),
    pub distance_m: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

fn default_bandwidth_range() -> (f64, f64) {
    (0.02, 0.06)
}

impl DatasetConfig {
    /// Six classes, five power bins, 25 samples per cell (750 samples).
    pub fn desk(rng_seed: u64) -> Self {
        DatasetConfig {
            n_per_class: 25,
            dims: Dims::DESK,
            class_set: InterferenceClass::ALL.to_vec(),
            power_bins: vec![-20.0, -12.5, -5.0, 2.5, 10.0],
            noise_floor_db: SignalModel::default().noise_floor_db,
            rng_seed,
            bandwidth_range: default_bandwidth_range(),
            distance_m: 0.0,
        }
    }

    pub fn signal_model(&self) -> SignalModel {
        SignalModel { noise_floor_db: self.noise_floor_db, ..SignalModel::default() }
    }

    pub fn expected_len(&self) -> usize {
        self.n_per_class * self.class_set.len() * self.power_bins.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_set.is_empty() {
            return Err(Error::Empty("class_set"));
        }
        if self.power_bins.is_empty() {
            return Err(Error::Empty("power_bins"));
        }
        if self.n_per_class == 0 {
            return Err(Error::Range { field: "n_per_class", msg: "must be at least 1".into() });
        }
        self.dims.validate()?;
        if !self.noise_floor_db.is_finite() {
            return Err(Error::NonFinite("noise_floor_db".into()));
        }
        if self.power_bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Range { field: "power_bins", msg: "must be strictly ascending".into() });
        }
        if let Some(p) = self.power_bins.iter().find(|p| !(MIN_POWER_DB..=MAX_POWER_DB).contains(*p)) {
            return Err(Error::Range { field: "power_bins", msg: format!("{p} not in [-20, 10]") });
        }
        let (lo, hi) = self.bandwidth_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Range { field: "bandwidth_range", msg: format!("({lo}, {hi}) not inside (0, 1]") });
        }
        if !(self.distance_m.is_finite() && self.distance_m >= 0.0) {
            return Err(Error::Range { field: "distance_m", msg: format!("{}", self.distance_m) });
        }
        Ok(())
    }

    /// Records in canonical order: class, then power bin, then repetition.
    pub fn records(&self) -> Result<Vec<InterferenceRecord>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        let (lo, hi) = self.bandwidth_range;
        let mut out = Vec::with_capacity(self.expected_len());
        for &class in &self.class_set {
            for &power_db in &self.power_bins {
                for _ in 0..self.n_per_class {
                    let seed = rng.random::<u64>();
                    let bandwidth = if lo == hi { lo } else { rng.random_range(lo..hi) };
                    out.push(InterferenceRecord {
                        class,
                        power_db,
                        bandwidth,
                        distance_m: self.distance_m,
                        seed,
                        provenance: Provenance::Synthetic,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Stratified dataset: every (class, power bin) cell holds `n_per_class` samples.
pub fn make_dataset(config: &DatasetConfig, exec: Exec) -> Result<Vec<Sample>> {
    let records = config.records()?;
    let model = config.signal_model();
    let specs = exec.map(&records, |r| model.synth(r, config.dims));
    records
        .into_iter()
        .zip(specs)
        .map(|(record, spec)| Ok(Sample { spectrogram: spec?, record }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, classes: usize, bins: usize, seed: u64) -> DatasetConfig {
        DatasetConfig {
            n_per_class: n,
            dims: Dims::new(16, 16),
            class_set: InterferenceClass::ALL[..classes].to_vec(),
            power_bins: (0..bins).map(|i| -20.0 + 5.0 * i as f64).collect(),
            noise_floor_db: -100.0,
            rng_seed: seed,
            bandwidth_range: (0.02, 0.06),
            distance_m: 0.0,
        }
    }

    #[test]
    fn noise_only_is_flat() {
        let s = synth_spectrogram(&InterferenceRecord::new(InterferenceClass::Noise, 10.0, 7), Dims::DESK).unwrap();
        let max = s.data.iter().cloned().fold(f32::MIN, f32::max);
        let min = s.data.iter().cloned().fold(f32::MAX, f32::min);
        // 8 sigma of background noise over the normalization span
        assert!(max - min < 0.25, "spread {}", max - min);
        assert!(s.is_normalized());
    }

    #[test]
    fn noise_ignores_power() {
        let a = synth_spectrogram(&InterferenceRecord::new(InterferenceClass::Noise, 10.0, 3), Dims::DESK).unwrap();
        let b = synth_spectrogram(&InterferenceRecord::new(InterferenceClass::Noise, -20.0, 3), Dims::DESK).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tone_ridge_brighter_at_higher_power() {
        let m = SignalModel::default();
        let ridge_mean = |p: f64| {
            let r = InterferenceRecord::new(InterferenceClass::Tone, p, 11);
            let t = m.template(&r, Dims::DESK);
            let s = m.synth(&r, Dims::DESK).unwrap();
            let (sum, n) = t.iter().zip(&s.data).filter(|(g, _)| **g > 0.5).fold((0.0, 0), |(a, n), (_, &v)| (a + v as f64, n + 1));
            sum / n as f64
        };
        assert!(ridge_mean(10.0) > ridge_mean(-20.0));
    }

    #[test]
    fn distance_follows_inverse_square_in_db() {
        let m = SignalModel::default();
        let near = InterferenceRecord::new(InterferenceClass::Chirp, 0.0, 5).with_distance(10.0);
        let far = near.clone().with_distance(100.0);
        let drop = m.interference_level_db(&near) - m.interference_level_db(&far);
        assert!((drop - 20.0 * (100.0f64 / 10.0).log10()).abs() < 1e-12);
        let (a, b) = (m.raw_db(&near, Dims::DESK).unwrap(), m.raw_db(&far, Dims::DESK).unwrap());
        let t = m.template(&near, Dims::DESK);
        let ridge: Vec<usize> = (0..t.len()).filter(|&i| t[i] > 0.5).collect();
        assert!(!ridge.is_empty());
        let mean = |v: &[f64]| ridge.iter().map(|&i| v[i]).sum::<f64>() / ridge.len() as f64;
        let mean_gain = ridge.iter().map(|&i| t[i]).sum::<f64>() / ridge.len() as f64;
        // same seed, same noise: the ridge mean drops by exactly gain * 20 dB
        assert!((mean(&a) - mean(&b) - 20.0 * mean_gain).abs() < 1e-9);
        for i in 0..t.len() {
            assert!((a[i] - b[i] - 20.0 * t[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn chirp_is_a_linear_ramp_and_tone_is_a_fixed_row() {
        let m = SignalModel::default();
        let d = Dims::DESK;
        let argmax_row = |t: &[f64], col: usize| (0..d.height).max_by(|&a, &b| t[a * d.width + col].total_cmp(&t[b * d.width + col])).unwrap();
        let tone = m.template(&InterferenceRecord::new(InterferenceClass::Tone, 0.0, 1), d);
        let rows: Vec<usize> = (0..d.width).map(|c| argmax_row(&tone, c)).collect();
        assert!(rows.iter().all(|&r| r == rows[0]));
        let chirp = m.template(&InterferenceRecord::new(InterferenceClass::Chirp, 0.0, 1), d);
        let rows: Vec<usize> = (0..d.width).map(|c| argmax_row(&chirp, c)).collect();
        // between wraps the peak row advances by sweeps * height / width per column
        let step = m.chirp_sweeps * d.height as f64 / d.width as f64;
        let ok = rows.windows(2).filter(|w| w[1] >= w[0] && ((w[1] - w[0]) as f64 - step).abs() <= 1.0).count();
        assert!(ok >= d.width - 1 - 2 * m.chirp_sweeps as usize, "{rows:?}");
    }

    #[test]
    fn integrated_energy_increases_with_power() {
        let m = SignalModel::default();
        for class in &InterferenceClass::ALL[1..] {
            let energies: Vec<f64> = [-20.0, -12.5, -5.0, 2.5, 10.0]
                .iter()
                .map(|&p| m.synth(&InterferenceRecord::new(*class, p, 9), Dims::DESK).unwrap().data.iter().map(|&v| v as f64).sum())
                .collect();
            assert!(energies.windows(2).all(|w| w[1] > w[0]), "{class}: {energies:?}");
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut r = InterferenceRecord::new(InterferenceClass::Tone, f64::NAN, 1);
        assert!(matches!(synth_spectrogram(&r, Dims::DESK), Err(Error::NonFinite(_))));
        r.power_db = 0.0;
        r.bandwidth = f64::INFINITY;
        assert!(matches!(synth_spectrogram(&r, Dims::DESK), Err(Error::NonFinite(_))));
        r.bandwidth = 0.05;
        assert!(synth_spectrogram(&r, Dims::new(4, 4)).is_err());
        assert!(matches!("sawtooth".parse::<InterferenceClass>(), Err(Error::UnknownClass(_))));
        assert_eq!("Wideband-Noise".parse::<InterferenceClass>().unwrap(), InterferenceClass::WidebandNoise);
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let c = cfg(2, 3, 4, 42);
        let a = make_dataset(&c, Exec::Parallel).unwrap();
        assert_eq!(a.len(), 24);
        let b = make_dataset(&c, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        let other = make_dataset(&cfg(2, 3, 4, 43), Exec::Parallel).unwrap();
        assert!(a.iter().zip(&other).any(|(x, y)| x.spectrogram != y.spectrogram));
        for class in &c.class_set {
            for p in &c.power_bins {
                assert_eq!(a.iter().filter(|s| s.record.class == *class && s.record.power_db == *p).count(), 2);
            }
        }
    }

    #[test]
    fn dataset_config_validation() {
        let mut c = cfg(1, 2, 2, 0);
        c.class_set.clear();
        assert!(matches!(make_dataset(&c, Exec::Sequential), Err(Error::Empty("class_set"))));
        let mut c = cfg(1, 2, 2, 0);
        c.power_bins = vec![0.0, -5.0];
        assert!(make_dataset(&c, Exec::Sequential).is_err());
        let mut c = cfg(1, 2, 2, 0);
        c.dims = Dims::new(4, 64);
        assert!(make_dataset(&c, Exec::Sequential).is_err());
        assert_eq!("64x32".parse::<Dims>().unwrap(), Dims::new(64, 32));
        assert!("64".parse::<Dims>().is_err());
    }
}
