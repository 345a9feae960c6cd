use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use specvae_nn::{Element, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::synth::Spectrogram;

/// Per-sample diagonal Gaussian posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentParams {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        let p = LatentParams { mu, log_var };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.log_var.len() {
            return Err(Error::dims("latent log_var", self.mu.len(), self.log_var.len()));
        }
        if self.mu.is_empty() {
            return Err(Error::Empty("latent vector"));
        }
        if !self.mu.iter().chain(&self.log_var).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent parameters".into()));
        }
        Ok(())
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// Log density of `z` under this posterior.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(z)
            .map(|((m, lv), z)| -0.5 * (ln_2pi + lv + (z - m).powi(2) * (-lv).exp()))
            .sum()
    }
}

/// `z = mu + exp(log_var / 2) * noise`.
pub fn reparameterize(p: &LatentParams, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != p.dim() {
        return Err(Error::dims("reparameterization noise", p.dim(), noise.len()));
    }
    Ok(p.mu.iter().zip(&p.log_var).zip(noise).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect())
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))`.
pub fn kl_gaussian(p: &LatentParams) -> Result<f64> {
    p.validate()?;
    let kl: f64 = p.mu.iter().zip(&p.log_var).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum();
    // rounding can push an exact-zero divergence a hair below zero
    Ok(kl.max(0.0))
}

/// Shuffles every column of a `[batch, d]` matrix independently.
pub fn permute_dims<T: Element, R: Rng + ?Sized>(z: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    let (b, d) = (z.rows(), z.row_len());
    let src = z.data();
    let mut out = vec![T::zero(); b * d];
    let mut perm: Vec<usize> = (0..b).collect();
    for j in 0..d {
        perm.shuffle(rng);
        for (i, &p) in perm.iter().enumerate() {
            out[i * d + j] = src[p * d + j];
        }
    }
    Tensor::new(&[b, d], out)
}

/// Density-ratio TC estimate from `[n, 2]` discriminator logits, column 0
/// being the "joint" class: `mean(logit_0 - logit_1)`.
pub fn tc_from_logits<T: Element>(logits: &Tensor<T>) -> Result<f64> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::Empty("latent batch"));
    }
    Ok((0..n).map(|i| logits.row(i)[0].as_f64() - logits.row(i)[1].as_f64()).sum::<f64>() / n as f64)
}

/// Components of the training objective for one batch.
///
/// `recon` is the squared error summed over pixels and averaged over the
/// batch; `total = recon + beta * kl + gamma * tc_estimate`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub tc_estimate: f64,
    pub total: f64,
}

pub fn elbo_loss(
    x: &[&Spectrogram],
    x_hat: &[&Spectrogram],
    p: &[LatentParams],
    beta: f64,
    gamma: f64,
    tc: f64,
) -> Result<LossBreakdown> {
    if x.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if x_hat.len() != x.len() || p.len() != x.len() {
        return Err(Error::dims("loss batch", x.len(), (x_hat.len(), p.len())));
    }
    let mut recon = 0.0;
    for (a, b) in x.iter().zip(x_hat) {
        if a.dims() != b.dims() {
            return Err(Error::dims("reconstruction", a.dims(), b.dims()));
        }
        recon += a.data.iter().zip(&b.data).map(|(&u, &v)| (u as f64 - v as f64).powi(2)).sum::<f64>();
    }
    recon /= x.len() as f64;
    let mut kl = 0.0;
    for q in p {
        kl += kl_gaussian(q).map_err(|_| Error::NonFinite("kl".into()))?;
    }
    kl /= p.len() as f64;
    for (name, v) in [("recon", recon), ("kl", kl), ("tc", tc)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let total = recon + beta * kl + gamma * tc;
    Ok(LossBreakdown { recon, kl, tc_estimate: tc, total })
}

/// Graph form of the summed-pixel squared error, averaged over the batch.
pub fn recon_term<T: Element>(g: &mut Graph<T>, x: Var, x_hat: Var) -> Var {
    let n = g.value(x).rows();
    let diff = g.sub(x_hat, x);
    let sq = g.square(diff);
    let s = g.sum_all(sq);
    g.scale(s, 1.0 / n as f64)
}

/// Graph form of the batch-mean Gaussian KL.
pub fn kl_term<T: Element>(g: &mut Graph<T>, mu: Var, log_var: Var) -> Var {
    let n = g.value(mu).rows();
    let m2 = g.square(mu);
    let v = g.exp(log_var);
    let a = g.add(m2, v);
    let a = g.sub(a, log_var);
    let a = g.add_scalar(a, -1.0);
    let s = g.sum_all(a);
    g.scale(s, 0.5 / n as f64)
}

pub fn reparam_term<T: Element>(g: &mut Graph<T>, mu: Var, log_var: Var, noise: Tensor<T>) -> Var {
    let e = g.input(noise);
    let half = g.scale(log_var, 0.5);
    let sd = g.exp(half);
    let s = g.mul(sd, e);
    g.add(mu, s)
}

/// Graph form of the logit-difference TC estimate.
pub fn tc_term<T: Element>(g: &mut Graph<T>, logits: Var) -> Var {
    let a = g.narrow_cols(logits, 0, 1);
    let b = g.narrow_cols(logits, 1, 1);
    let d = g.sub(a, b);
    g.mean_all(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lp(mu: &[f64], lv: &[f64]) -> LatentParams {
        LatentParams::new(mu.to_vec(), lv.to_vec()).unwrap()
    }

    #[test]
    fn reparameterize_examples() {
        let n = [0.3, -1.2];
        assert_eq!(reparameterize(&lp(&[0.0, 0.0], &[0.0, 0.0]), &n).unwrap(), n.to_vec());
        assert_eq!(reparameterize(&lp(&[1.5, -2.0], &[0.7, 3.0]), &[0.0, 0.0]).unwrap(), vec![1.5, -2.0]);
        let z = reparameterize(&lp(&[1.0, 2.0], &[0.0, 4f64.ln()]), &[1.0, 1.0]).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-12 && (z[1] - 4.0).abs() < 1e-12);
        assert!(reparameterize(&lp(&[1.0], &[0.0]), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_gaussian(&lp(&[0.0; 4], &[0.0; 4])).unwrap(), 0.0);
        assert!((kl_gaussian(&lp(&[1.0], &[0.0])).unwrap() - 0.5).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((kl_gaussian(&lp(&[0.0], &[1.0])).unwrap() - (e - 2.0) / 2.0).abs() < 1e-12);
        assert!(LatentParams::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn permute_dims_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let one = Tensor::<f64>::new(&[1, 3], vec![1.0, 2.0, 3.0]);
        assert_eq!(permute_dims(&one, &mut rng), one);
        let constant = Tensor::<f64>::new(&[4, 2], vec![5.0, 0.0, 5.0, 1.0, 5.0, 2.0, 5.0, 3.0]);
        let p = permute_dims(&constant, &mut rng);
        assert!((0..4).all(|i| p.row(i)[0] == 5.0));
    }

    #[test]
    fn elbo_examples() {
        let x = Spectrogram::new(8, 8, (0..64).map(|i| i as f32 / 64.0).collect()).unwrap();
        let y = Spectrogram::new(8, 8, vec![0.5; 64]).unwrap();
        let p0 = lp(&[0.0; 3], &[0.0; 3]);
        let b = elbo_loss(&[&x], &[&x], &[p0.clone()], 1.0, 0.0, 0.7).unwrap();
        assert_eq!((b.recon, b.kl), (0.0, 0.0));
        let p = lp(&[0.4, -1.0, 0.2], &[0.3, -0.5, 0.0]);
        let k = kl_gaussian(&p).unwrap();
        let b1 = elbo_loss(&[&x], &[&y], &[p.clone()], 1.0, 0.0, 0.0).unwrap();
        let b2 = elbo_loss(&[&x], &[&y], &[p.clone()], 2.0, 0.0, 0.0).unwrap();
        assert!((b2.total - b1.total - k).abs() < 1e-12);
        assert_eq!(b1.total, b1.recon + b1.kl);
        let e = elbo_loss(&[&x], &[&y], &[p], 1.0, 1.0, f64::NAN).unwrap_err();
        assert!(e.to_string().contains("tc"));
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(v in prop::collection::vec((-5.0f64..5.0, -8.0f64..8.0), 1..32)) {
            let (mu, lv): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            prop_assert!(kl_gaussian(&LatentParams::new(mu, lv).unwrap()).unwrap() >= 0.0);
        }

        #[test]
        fn permutation_preserves_column_multisets(b in 1usize..40, d in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::<f64>::randn(&[b, d], &mut rng);
            let p = permute_dims(&z, &mut rng);
            for j in 0..d {
                let mut a: Vec<f64> = (0..b).map(|i| z.row(i)[j]).collect();
                let mut c: Vec<f64> = (0..b).map(|i| p.row(i)[j]).collect();
                a.sort_by(f64::total_cmp);
                c.sort_by(f64::total_cmp);
                prop_assert_eq!(a, c);
            }
        }
    }
}
