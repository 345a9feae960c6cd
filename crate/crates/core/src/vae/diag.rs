use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{kl_gaussian, reparameterize, LatentParams};
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const MIN_DIAG_SAMPLES: usize = 256;

/// Both sides of `E_x KL(q(z|x) || p(z)) = I(x; z) + KL(q(z) || p(z))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlDecomposition {
    /// Average closed-form posterior KL.
    pub lhs: f64,
    pub mutual_info: f64,
    pub marginal_kl: f64,
    pub rhs: f64,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Monte Carlo estimate of the right-hand side with `q(z)` taken as the
/// mixture of all posteriors in `params`.
///
/// Each posterior contributes `samples_per_point` draws; sample `s` of
/// point `n` uses the RNG stream `n` so the result does not depend on `exec`.
pub fn kl_decomposition(params: &[LatentParams], samples_per_point: usize, seed: u64, exec: Exec) -> Result<KlDecomposition> {
    if params.len() < MIN_DIAG_SAMPLES {
        return Err(Error::Range {
            field: "sample",
            msg: format!("need at least {MIN_DIAG_SAMPLES} posteriors, got {}", params.len()),
        });
    }
    if samples_per_point == 0 {
        return Err(Error::Range { field: "samples_per_point", msg: "must be at least 1".into() });
    }
    let d = params[0].dim();
    for p in params {
        if p.dim() != d {
            return Err(Error::dims("latent params", d, p.dim()));
        }
        p.validate()?;
    }
    let n = params.len();
    let lhs = params.iter().map(kl_gaussian).sum::<Result<f64>>()? / n as f64;
    let log_n = (n as f64).ln();
    let prior_log = |z: &[f64]| -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        z.iter().map(|v| -0.5 * (ln_2pi + v * v)).sum()
    };
    let per_point = exec.map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut mi = 0.0;
        let mut mk = 0.0;
        let mut comp = vec![0.0; n];
        for _ in 0..samples_per_point {
            let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = reparameterize(&params[i], &eps).expect("dims checked");
            for (c, q) in comp.iter_mut().zip(params) {
                *c = q.log_density(&z);
            }
            let log_q_cond = comp[i];
            let log_q = log_sum_exp(&comp) - log_n;
            mi += log_q_cond - log_q;
            mk += log_q - prior_log(&z);
        }
        (mi / samples_per_point as f64, mk / samples_per_point as f64)
    });
    let mutual_info = per_point.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let marginal_kl = per_point.iter().map(|p| p.1).sum::<f64>() / n as f64;
    Ok(KlDecomposition { lhs, mutual_info, marginal_kl, rhs: mutual_info + marginal_kl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn collapsed_posterior_gives_zero_on_both_sides() {
        let p = vec![LatentParams::new(vec![0.0; 3], vec![0.0; 3]).unwrap(); 256];
        let k = kl_decomposition(&p, 2, 1, Exec::Parallel).unwrap();
        assert_eq!(k.lhs, 0.0);
        assert!(k.mutual_info.abs() < 1e-9 && k.marginal_kl.abs() < 1e-9, "{k:?}");
    }

    #[test]
    fn repeated_input_has_no_mutual_information() {
        let p = vec![LatentParams::new(vec![1.5, -0.3], vec![-1.0, 0.4]).unwrap(); 300];
        let k = kl_decomposition(&p, 1, 2, Exec::Sequential).unwrap();
        assert!(k.mutual_info.abs() < 1e-9, "{k:?}");
    }

    #[test]
    fn identity_holds_for_spread_posteriors_and_exec_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<LatentParams> = (0..400)
            .map(|_| {
                LatentParams::new(
                    vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                    vec![rng.random_range(-3.0..0.0), rng.random_range(-3.0..0.0)],
                )
                .unwrap()
            })
            .collect();
        let a = kl_decomposition(&p, 4, 9, Exec::Parallel).unwrap();
        assert_eq!(a, kl_decomposition(&p, 4, 9, Exec::Sequential).unwrap());
        assert!((a.lhs - a.rhs).abs() / a.lhs.max(1.0) < 0.15, "{a:?}");
        assert!(a.mutual_info > 0.0);
    }

    #[test]
    fn too_few_samples_rejected() {
        let p = vec![LatentParams::new(vec![0.0], vec![0.0]).unwrap(); 255];
        assert!(kl_decomposition(&p, 1, 0, Exec::Parallel).is_err());
    }
}
