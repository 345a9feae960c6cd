//! Config file sections. Every key is optional; CLI flags override file
//! values, and a global seed overrides every component seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use specvae::augment::{AugmentEvalConfig, Backbone, SkipPattern};
use specvae::classifier::{CnnConfig, DenseClassifierConfig};
use specvae::cvae_gan::CvaeGanConfig;
use specvae::{DatasetConfig, Error, LatentMode, Result, TrainConfig};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainCmdConfig,
    pub compress: CompressConfig,
    pub augment: AugmentConfig,
    pub bench: BenchConfig,
    pub augment_eval: AugmentEvalConfig,
    pub traverse: TraverseConfig,
    pub histogram: HistogramConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dataset: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    /// Dataset directory; generated from `dataset` when absent.
    pub data: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: Backbone,
    pub latent_dim: usize,
    pub vae: TrainConfig,
    pub cvae_gan: CvaeGanConfig,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        TrainCmdConfig {
            data: None,
            dataset: DatasetConfig::default(),
            model: Backbone::Factorvae,
            latent_dim: 16,
            vae: TrainConfig::desk(),
            cvae_gan: CvaeGanConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressConfig {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub mode: LatentMode,
    pub noise_seed: u64,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig { model: None, data: None, dataset: DatasetConfig::default(), mode: LatentMode::Mu, noise_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub lo: f64,
    pub hi: f64,
    pub n_steps: usize,
    pub skip_pattern: SkipPattern,
    pub pairs: Option<usize>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            model: None,
            data: None,
            dataset: DatasetConfig::default(),
            lo: -20.0,
            hi: -5.0,
            n_steps: 3,
            skip_pattern: SkipPattern::All,
            pairs: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub data: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub test_fraction: f64,
    pub latent_dims: Vec<usize>,
    pub modes: Vec<LatentMode>,
    pub n_layers: Vec<usize>,
    pub hidden_widths: Vec<usize>,
    pub relu: Vec<bool>,
    pub batchnorm: Vec<bool>,
    pub repetitions: usize,
    pub timing_reps: usize,
    pub vae: TrainConfig,
    pub dense: DenseClassifierConfig,
    pub cnn: CnnConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            data: None,
            dataset: DatasetConfig::default(),
            test_fraction: 0.2,
            latent_dims: vec![16, 32, 64, 128, 256],
            modes: vec![LatentMode::Mu],
            n_layers: vec![3],
            hidden_widths: vec![128],
            relu: vec![true],
            batchnorm: vec![false],
            repetitions: 3,
            timing_reps: 5,
            vae: TrainConfig::desk(),
            dense: DenseClassifierConfig::default(),
            cnn: CnnConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraverseConfig {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub dataset: DatasetConfig,
    /// Sample whose code is traversed.
    pub index: usize,
    /// Coordinate to sweep; every coordinate when absent.
    pub dim: Option<usize>,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
    /// Inputs averaged for the sensitivity table.
    pub sensitivity_samples: usize,
}

impl Default for TraverseConfig {
    fn default() -> Self {
        TraverseConfig {
            model: None,
            data: None,
            dataset: DatasetConfig::default(),
            index: 0,
            dim: None,
            lo: -3.0,
            hi: 3.0,
            steps: 7,
            sensitivity_samples: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    pub data: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub index: usize,
}

/// Overwrites every component seed.
pub trait Seeded {
    fn set_seed(&mut self, seed: u64);
}

impl Seeded for SynthConfig {
    fn set_seed(&mut self, seed: u64) {
        self.dataset.rng_seed = seed;
    }
}

impl Seeded for TrainCmdConfig {
    fn set_seed(&mut self, seed: u64) {
        self.dataset.rng_seed = seed;
        self.vae.seed = seed;
        self.cvae_gan.seed = seed;
    }
}

impl Seeded for CompressConfig {
    fn set_seed(&mut self, seed: u64) {
        self.dataset.rng_seed = seed;
        self.noise_seed = seed;
    }
}

impl Seeded for AugmentConfig {
    fn set_seed(&mut self, seed: u64) {
        self.dataset.rng_seed = seed;
        self.seed = seed;
    }
}

impl Seeded for BenchConfig {
    fn set_seed(&mut self, seed: u64) {
        self.dataset.rng_seed = seed;
        self.vae.seed = seed;
        self.dense.seed = seed;
        self.cnn.seed = seed;
        self.seed = seed;
    }
}

impl Seeded for AugmentEvalConfig {
    fn set_seed(&mut self, seed: u64) {
        *self = std::mem::take(self).with_seed(seed);
    }
}

impl Seeded for TraverseConfig {
    fn set_seed(&mut self, seed: u64) {
        self.dataset.rng_seed = seed;
    }
}

impl Seeded for HistogramConfig {
    fn set_seed(&mut self, seed: u64) {
        self.dataset.rng_seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_and_unknown_keys() {
        let c: FileConfig = toml::from_str("seed = 3\n[train]\nlatent_dim = 8\n[train.vae]\nepochs = 2\n").unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.train.latent_dim, 8);
        assert_eq!(c.train.vae.epochs, 2);
        assert_eq!(c.train.vae.batch_size, TrainConfig::desk().batch_size);
        assert!(toml::from_str::<FileConfig>("[train]\nlatent = 8\n").is_err());
        assert!(toml::from_str::<FileConfig>("[train.vae]\nepoch = 8\n").is_err());
        assert!(toml::from_str::<FileConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn global_seed_reaches_components() {
        let mut b = BenchConfig::default();
        b.set_seed(9);
        assert_eq!((b.dataset.rng_seed, b.vae.seed, b.dense.seed, b.cnn.seed), (9, 9, 9, 9));
        let mut a = AugmentEvalConfig::default();
        a.set_seed(4);
        assert_eq!((a.seed, a.vae.seed, a.cnn.seed), (4, 4, 4));
    }
}
