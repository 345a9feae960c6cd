//! Raw-pixel baseline CNN, dense classifiers on latent codes, evaluation
//! and hyperparameter sweeps.

mod cnn;
mod dense;
mod sweep;

pub use cnn::{train_baseline_cnn, CnnConfig, ResidualCnn};
pub use dense::{train_dense, train_dense_rows, DenseClassifier, DenseClassifierConfig};
pub use sweep::{hyperparameter_sweep, CodeSet, SweepCell, SweepCellReport, SweepReport};

use std::time::Instant;

use serde::{Deserialize, Serialize};
use specvae_nn::Tensor;

use crate::codec::{compress_params, LatentMode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::synth::Spectrogram;
use crate::vae::VaeModel;

pub const MIN_TIMING_REPS: usize = 5;

pub trait Predictor<I>: Sync {
    fn predict(&self, xs: &[&I]) -> Vec<usize>;
}

/// Encoder followed by a dense head; timing this includes the encoder.
pub struct LatentPipeline<'a> {
    pub vae: &'a VaeModel,
    pub dense: &'a DenseClassifier,
    pub mode: LatentMode,
}

impl Predictor<Spectrogram> for LatentPipeline<'_> {
    fn predict(&self, xs: &[&Spectrogram]) -> Vec<usize> {
        let params = self.vae.encode(xs, Exec::Sequential).expect("inputs match the encoder");
        let codes = compress_params(&params, self.vae.dims(), 0, self.mode, 0).expect("encoder output is finite");
        let refs: Vec<_> = codes.iter().collect();
        self.dense.predict(&refs)
    }
}

pub(crate) fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    (0..t.rows())
        .map(|i| t.row(i).iter().enumerate().fold(0, |best, (j, &v)| if v > t.row(i)[best] { j } else { best }))
        .collect()
}

pub(crate) fn check_labels(n: usize, labels: &[usize], n_classes: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    if labels.len() != n {
        return Err(Error::dims("labels", n, labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Range { field: "label", msg: format!("{y} >= {n_classes} classes") });
    }
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Err(Error::config("need at least 2 classes in the training labels"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_classes: usize,
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub train_time_s: f64,
    pub infer_time_us_per_sample: f64,
}

impl EvalReport {
    pub fn from_predictions(pred: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("test set"));
        }
        if pred.len() != labels.len() {
            return Err(Error::dims("predictions", labels.len(), pred.len()));
        }
        let mut confusion = vec![vec![0u64; n_classes]; n_classes];
        for (&p, &y) in pred.iter().zip(labels) {
            if p >= n_classes || y >= n_classes {
                return Err(Error::Range { field: "label", msg: format!("({y}, {p}) outside {n_classes} classes") });
            }
            confusion[y][p] += 1;
        }
        let correct: u64 = (0..n_classes).map(|k| confusion[k][k]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[k] as f64 / n as f64)
            })
            .collect();
        Ok(EvalReport {
            n_classes,
            accuracy: correct as f64 / labels.len() as f64,
            per_class_accuracy,
            confusion,
            train_time_s: 0.0,
            infer_time_us_per_sample: 0.0,
        })
    }

    /// Accuracy restricted to the given true classes.
    pub fn accuracy_on(&self, classes: &[usize]) -> f64 {
        let (mut hit, mut n) = (0u64, 0u64);
        for &k in classes {
            hit += self.confusion[k][k];
            n += self.confusion[k].iter().sum::<u64>();
        }
        if n == 0 {
            0.0
        } else {
            hit as f64 / n as f64
        }
    }

    /// Same report with timings zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        EvalReport { train_time_s: 0.0, infer_time_us_per_sample: 0.0, ..self.clone() }
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock inference time per sample over `reps` full passes, in
/// microseconds. Runs on the calling thread.
pub fn time_inference<I, P: Predictor<I>>(model: &P, xs: &[&I], reps: usize) -> f64 {
    let reps = reps.max(MIN_TIMING_REPS);
    let times = (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(model.predict(xs));
            t.elapsed().as_secs_f64()
        })
        .collect();
    median(times) * 1e6 / xs.len().max(1) as f64
}

pub fn evaluate<I, P: Predictor<I>>(model: &P, xs: &[&I], labels: &[usize], n_classes: usize, timing_reps: usize) -> Result<EvalReport> {
    let pred = model.predict(xs);
    let mut r = EvalReport::from_predictions(&pred, labels, n_classes)?;
    r.infer_time_us_per_sample = time_inference(model, xs, timing_reps);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictor() {
        let y: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let r = EvalReport::from_predictions(&y, &y, 4).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert_eq!(c == 0, i != j);
            }
        }
    }

    #[test]
    fn uniform_random_predictor_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y: Vec<usize> = (0..1000).map(|_| rng.random_range(0..6)).collect();
        let p: Vec<usize> = (0..1000).map(|_| rng.random_range(0..6)).collect();
        let r = EvalReport::from_predictions(&p, &y, 6).unwrap();
        assert!((r.accuracy - 1.0 / 6.0).abs() <= 0.05, "{}", r.accuracy);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    proptest! {
        #[test]
        fn confusion_rows_match_class_counts(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..300)) {
            let (y, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = EvalReport::from_predictions(&p, &y, 5).unwrap();
            for k in 0..5 {
                prop_assert_eq!(r.confusion[k].iter().sum::<u64>(), y.iter().filter(|&&v| v == k).count() as u64);
            }
            let trace: u64 = (0..5).map(|k| r.confusion[k][k]).sum();
            prop_assert_eq!(r.accuracy, trace as f64 / y.len() as f64);
        }
    }
}
