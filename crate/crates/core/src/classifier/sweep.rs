use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, train_dense, DenseClassifierConfig};
use crate::codec::{compress_params, compression_rate, LatentMode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::synth::Dims;
use crate::vae::LatentParams;

/// One grid point of the compressed-classifier search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub latent_dim: usize,
    pub mode: LatentMode,
    pub n_layers: usize,
    pub hidden_width: usize,
    pub use_relu: bool,
    pub use_batchnorm: bool,
}

/// Posteriors of a train/test split under one trained encoder.
#[derive(Clone, Debug)]
pub struct CodeSet {
    pub train: Vec<LatentParams>,
    pub train_labels: Vec<usize>,
    pub test: Vec<LatentParams>,
    pub test_labels: Vec<usize>,
    pub n_classes: usize,
    pub source_dims: Dims,
    pub model_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCellReport {
    pub cell: SweepCell,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub compression_rate: f64,
    pub train_time_s: f64,
    pub infer_time_us_per_sample: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub repetitions: usize,
    pub base_seed: u64,
    pub cells: Vec<SweepCellReport>,
}

impl SweepReport {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn best(&self) -> Option<&SweepCellReport> {
        self.cells.iter().filter(|c| c.error.is_none()).max_by(|a, b| a.mean_accuracy.total_cmp(&b.mean_accuracy))
    }

    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for c in &mut r.cells {
            c.train_time_s = 0.0;
            c.infer_time_us_per_sample = 0.0;
        }
        r
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "latent_dim,mode,n_layers,hidden_width,relu,batchnorm,mean_accuracy,std_accuracy,compression_rate,train_time_s,infer_time_us_per_sample,error\n",
        );
        for c in &self.cells {
            let k = &c.cell;
            let mode = serde_json::to_value(k.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{:.6},{},{:.6},{:.3},{}\n",
                k.latent_dim,
                mode,
                k.n_layers,
                k.hidden_width,
                k.use_relu,
                k.use_batchnorm,
                c.mean_accuracy,
                c.std_accuracy,
                c.compression_rate,
                c.train_time_s,
                c.infer_time_us_per_sample,
                c.error.as_deref().unwrap_or("").replace(',', ";"),
            ));
        }
        out
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, s)
}

fn run_cell(cell: &SweepCell, codes: &CodeSet, repetitions: usize, base: &DenseClassifierConfig, exec: Exec) -> Result<SweepCellReport> {
    let cfg = DenseClassifierConfig {
        n_layers: cell.n_layers,
        hidden_width: cell.hidden_width,
        use_relu: cell.use_relu,
        use_batchnorm: cell.use_batchnorm,
        ..base.clone()
    };
    cfg.validate()?;
    let runs = exec.map_range(repetitions, |r| -> Result<_> {
        let seed = base.seed + r as u64;
        let train = compress_params(&codes.train, codes.source_dims, codes.model_id, cell.mode, seed)?;
        let test = compress_params(&codes.test, codes.source_dims, codes.model_id, cell.mode, seed.wrapping_add(1 << 32))?;
        let t = Instant::now();
        let m = train_dense(&train, &codes.train_labels, codes.n_classes, &DenseClassifierConfig { seed, ..cfg.clone() })?.model;
        let train_s = t.elapsed().as_secs_f64();
        let refs: Vec<_> = test.iter().collect();
        let rep = evaluate(&m, &refs, &codes.test_labels, codes.n_classes, 0)?;
        Ok((rep.accuracy, train_s, rep.infer_time_us_per_sample))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let accuracies: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accuracies);
    Ok(SweepCellReport {
        cell: cell.clone(),
        compression_rate: compression_rate(codes.source_dims, cell.mode.payload_len(cell.latent_dim))?,
        mean_accuracy,
        std_accuracy,
        accuracies,
        train_time_s: mean_std(&runs.iter().map(|r| r.1).collect::<Vec<_>>()).0,
        infer_time_us_per_sample: mean_std(&runs.iter().map(|r| r.2).collect::<Vec<_>>()).0,
        error: None,
    })
}

/// Runs every grid cell `repetitions` times with seeds `base.seed + r`.
///
/// `code_source` is called once per distinct latent dimension, so each
/// encoder is trained once. A failing cell is recorded with its error and
/// the sweep continues.
pub fn hyperparameter_sweep<F>(
    grid: &[SweepCell],
    repetitions: usize,
    base: &DenseClassifierConfig,
    mut code_source: F,
    exec: Exec,
) -> Result<SweepReport>
where
    F: FnMut(usize) -> Result<CodeSet>,
{
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    if repetitions == 0 {
        return Err(Error::Range { field: "repetitions", msg: "must be at least 1".into() });
    }
    let mut sources: BTreeMap<usize, std::result::Result<CodeSet, String>> = BTreeMap::new();
    let mut cells = Vec::with_capacity(grid.len());
    for cell in grid {
        let codes = sources.entry(cell.latent_dim).or_insert_with(|| code_source(cell.latent_dim).map_err(|e| e.to_string()));
        let result = match codes {
            Ok(codes) => run_cell(cell, codes, repetitions, base, exec).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        cells.push(result.unwrap_or_else(|e| SweepCellReport {
            cell: cell.clone(),
            accuracies: Vec::new(),
            mean_accuracy: f64::NAN,
            std_accuracy: f64::NAN,
            compression_rate: f64::NAN,
            train_time_s: 0.0,
            infer_time_us_per_sample: 0.0,
            error: Some(e),
        }));
    }
    Ok(SweepReport { repetitions, base_seed: base.seed, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic_codes(d: usize) -> Result<CodeSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
        let mut make = |n: usize| -> (Vec<LatentParams>, Vec<usize>) {
            (0..n)
                .map(|i| {
                    let y = i % 3;
                    let mu = (0..d).map(|j| if j == y { 2.0 } else { 0.0 } + rng.random_range(-0.8..0.8)).collect();
                    (LatentParams::new(mu, vec![-2.0; d]).unwrap(), y)
                })
                .unzip()
        };
        let (train, train_labels) = make(60);
        let (test, test_labels) = make(30);
        Ok(CodeSet { train, train_labels, test, test_labels, n_classes: 3, source_dims: Dims::new(16, 16), model_id: 1 })
    }

    fn cell(d: usize) -> SweepCell {
        SweepCell { latent_dim: d, mode: LatentMode::Mu, n_layers: 2, hidden_width: 16, use_relu: true, use_batchnorm: false }
    }

    #[test]
    fn bookkeeping_and_identical_cells() {
        let base = DenseClassifierConfig { epochs: 10, ..Default::default() };
        let mut calls = 0;
        let r = hyperparameter_sweep(
            &[cell(4), cell(4)],
            3,
            &base,
            |d| {
                calls += 1;
                synthetic_codes(d)
            },
            Exec::Parallel,
        )
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(r.cells.len(), 2);
        assert!(r.cells.iter().all(|c| c.accuracies.len() == 3));
        let t = r.without_timings();
        assert_eq!(t.cells[0].accuracies, t.cells[1].accuracies);
        assert_eq!(t.cells[0].std_accuracy, t.cells[1].std_accuracy);
        assert_eq!(r.cells[0].compression_rate, 64.0);
    }

    #[test]
    fn empty_grid_and_failing_source() {
        let base = DenseClassifierConfig::default();
        assert!(hyperparameter_sweep(&[], 1, &base, synthetic_codes, Exec::Parallel).is_err());
        let r = hyperparameter_sweep(&[cell(2)], 1, &base, |_| Err(Error::config("boom")), Exec::Parallel).unwrap();
        assert_eq!(r.failed(), 1);
    }
}
