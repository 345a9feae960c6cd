use serde::{Deserialize, Serialize};

use crate::synth::Spectrogram;

pub const INR_BINS: usize = 256;

/// Two-population split of the pixel distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InrHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Pixels at or above this value belong to the interference population.
    pub threshold: f64,
    pub noise_mean: f64,
    pub interference_mean: f64,
    pub delta: f64,
    pub single_population: bool,
}

impl InrHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.bin_edges[i], self.bin_edges[i + 1], c));
        }
        out
    }
}

/// Otsu threshold index over a histogram: first bin of the upper class.
fn otsu(counts: &[u64], centers: &[f64]) -> usize {
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let sum_all: f64 = counts.iter().zip(centers).map(|(&c, m)| c as f64 * m).sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 1);
    for t in 1..counts.len() {
        w0 += counts[t - 1] as f64;
        s0 += counts[t - 1] as f64 * centers[t - 1];
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = s0 / w0 - (sum_all - s0) / w1;
        let between = w0 * w1 * d * d;
        if between > best {
            best = between;
            best_t = t;
        }
    }
    best_t
}

/// Histogram over the pixel range with an Otsu split into noise and
/// interference; population means use the raw pixel values.
pub fn inr_histogram(x: &Spectrogram) -> InrHistogram {
    let (lo, hi) = x.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
    let n = x.data.len();
    if !(hi > lo) {
        let mut counts = vec![0u64; INR_BINS];
        counts[0] = n as u64;
        let edges = (0..=INR_BINS).map(|i| lo + i as f64 / INR_BINS as f64).collect();
        return InrHistogram {
            bin_edges: edges,
            counts,
            threshold: lo,
            noise_mean: lo,
            interference_mean: lo,
            delta: 0.0,
            single_population: true,
        };
    }
    let width = (hi - lo) / INR_BINS as f64;
    let bin_of = |v: f64| (((v - lo) / width) as usize).min(INR_BINS - 1);
    let mut counts = vec![0u64; INR_BINS];
    for &v in &x.data {
        counts[bin_of(v as f64)] += 1;
    }
    let bin_edges: Vec<f64> = (0..=INR_BINS).map(|i| lo + i as f64 * width).collect();
    let centers: Vec<f64> = (0..INR_BINS).map(|i| lo + (i as f64 + 0.5) * width).collect();
    let t = otsu(&counts, &centers);
    let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
    for &v in &x.data {
        if bin_of(v as f64) >= t {
            s1 += v as f64;
            n1 += 1;
        } else {
            s0 += v as f64;
            n0 += 1;
        }
    }
    let noise_mean = s0 / n0 as f64;
    let interference_mean = s1 / n1 as f64;
    InrHistogram {
        threshold: bin_edges[t],
        bin_edges,
        counts,
        noise_mean,
        interference_mean,
        delta: interference_mean - noise_mean,
        single_population: false,
    }
}
