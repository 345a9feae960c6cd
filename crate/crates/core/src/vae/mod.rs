//! FactorVAE: convolutional encoder/decoder, Gaussian posterior, and an MLP
//! discriminator used for the total-correlation penalty.

mod diag;
mod loss;
mod tc;
mod train;

pub use diag::{kl_decomposition, KlDecomposition, MIN_DIAG_SAMPLES};
pub use loss::{
    elbo_loss, kl_gaussian, kl_term, permute_dims, recon_term, reparam_term, reparameterize, tc_from_logits, tc_term,
    LatentParams, LossBreakdown,
};
pub use tc::{estimate_tc, TcEstimatorConfig};
pub use train::{objective, train_factorvae, Objective, TrainConfig, Trained};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use specvae_nn::{Element, Graph, Linear, Mode, ParamStore, Tensor, Var};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nets::{image_batch, row_batch, ConvDecoder, ConvEncoder, Mlp, ResidualConfig, ResidualTrunk};
use crate::synth::{Dims, Spectrogram};

/// Rows per forward pass during inference.
pub const INFER_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ConvBlocks,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeArch {
    pub dims: Dims,
    pub latent_dim: usize,
    pub encoder: EncoderKind,
    /// Widths of the stride-2 conv blocks; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub residual: ResidualConfig,
    pub disc_width: usize,
    pub disc_layers: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub slope: f64,
}

impl VaeArch {
    pub fn desk(latent_dim: usize) -> Self {
        VaeArch {
            dims: Dims::DESK,
            latent_dim,
            encoder: EncoderKind::ConvBlocks,
            channels: vec![16, 32, 64, 64, 64],
            residual: ResidualConfig::desk(),
            disc_width: 1000,
            disc_layers: 6,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.latent_dim == 0 {
            return Err(Error::Range { field: "latent_dim", msg: "must be at least 1".into() });
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("channels must be a non-empty list of positive widths"));
        }
        let shrink = 1usize << self.channels.len();
        if self.dims.height % shrink != 0 || self.dims.width % shrink != 0 {
            return Err(Error::config(format!(
                "dims {} not divisible by {shrink} for {} conv blocks",
                self.dims,
                self.channels.len()
            )));
        }
        if self.encoder == EncoderKind::Residual
            && (self.residual.widths.is_empty() || self.residual.widths.len() != self.residual.blocks.len())
        {
            return Err(Error::config("residual widths and blocks must be non-empty and equal length"));
        }
        if self.disc_layers < 2 || self.disc_width == 0 {
            return Err(Error::config("discriminator needs at least 2 layers of positive width"));
        }
        Ok(())
    }

    fn bn(&self) -> (f64, f64) {
        (self.bn_momentum, self.bn_eps)
    }
}

#[derive(Clone, Debug)]
enum EncoderNet {
    Conv(ConvEncoder),
    Residual(ResidualTrunk, Linear),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    arch: VaeArch,
    beta: f64,
    gamma: f64,
    seed: u64,
}

pub const VAE_KIND: &str = "factorvae";

/// Encoder, decoder and TC discriminator with their parameters.
#[derive(Clone, Debug)]
pub struct VaeModel<T: Element = f32> {
    pub arch: VaeArch,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub encoder_params: ParamStore<T>,
    pub decoder_params: ParamStore<T>,
    pub disc_params: ParamStore<T>,
    encoder: EncoderNet,
    decoder: ConvDecoder,
    disc: Mlp,
}

impl<T: Element> VaeModel<T> {
    pub fn new(arch: VaeArch, beta: f64, gamma: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(beta.is_finite() && beta >= 0.0 && gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::Range { field: "beta/gamma", msg: format!("need finite non-negative, got {beta}/{gamma}") });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (arch.dims.height, arch.dims.width);
        let d = arch.latent_dim;
        let mut enc = ParamStore::new();
        let encoder = match arch.encoder {
            EncoderKind::ConvBlocks => EncoderNet::Conv(ConvEncoder::new(
                &mut enc,
                "enc",
                (h, w),
                &arch.channels,
                2 * d,
                arch.bn(),
                arch.slope,
                &mut rng,
            )),
            EncoderKind::Residual => {
                let trunk = ResidualTrunk::new(&mut enc, "enc", &arch.residual, arch.bn(), &mut rng);
                let head = Linear::new(&mut enc, "enc.head", arch.residual.out_channels(), 2 * d, &mut rng);
                EncoderNet::Residual(trunk, head)
            }
        };
        let mut dec = ParamStore::new();
        let decoder = ConvDecoder::new(&mut dec, "dec", (h, w), &arch.channels, d, arch.bn(), arch.slope, &mut rng);
        let mut dis = ParamStore::new();
        let disc = Mlp::new(&mut dis, "disc", d, arch.disc_width, arch.disc_layers, 2, arch.slope, &mut rng);
        Ok(VaeModel {
            arch,
            beta,
            gamma,
            seed,
            encoder_params: enc,
            decoder_params: dec,
            disc_params: dis,
            encoder,
            decoder,
            disc,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn dims(&self) -> Dims {
        self.arch.dims
    }

    /// Returns `(mu, log_var)` nodes for an image batch.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> (Var, Var) {
        let s = &self.encoder_params;
        let h = match &self.encoder {
            EncoderNet::Conv(e) => e.forward(g, s, x, mode),
            EncoderNet::Residual(trunk, head) => {
                let f = trunk.forward(g, s, x, mode);
                head.forward(g, s, f)
            }
        };
        let d = self.arch.latent_dim;
        (g.narrow_cols(h, 0, d), g.narrow_cols(h, d, d))
    }

    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var, mode: Mode) -> Var {
        self.decoder.forward(g, &self.decoder_params, z, mode)
    }

    pub fn disc_graph(&self, g: &mut Graph<T>, z: Var) -> Var {
        self.disc.forward(g, &self.disc_params, z)
    }

    pub fn check_input(&self, xs: &[&Spectrogram]) -> Result<()> {
        for x in xs {
            if x.dims() != self.arch.dims {
                return Err(Error::dims("encoder input", self.arch.dims, x.dims()));
            }
        }
        Ok(())
    }

    /// Posterior parameters in inference mode.
    pub fn encode(&self, xs: &[&Spectrogram], exec: Exec) -> Result<Vec<LatentParams>> {
        self.check_input(xs)?;
        let chunks: Vec<&[&Spectrogram]> = xs.chunks(INFER_CHUNK).collect();
        let d = self.arch.latent_dim;
        let out = exec.map(&chunks, |chunk| {
            let mut g = Graph::new();
            let x = g.input(image_batch::<T>(chunk));
            let (mu, lv) = self.encode_graph(&mut g, x, Mode::Eval);
            let (mu, lv) = (g.value(mu), g.value(lv));
            (0..chunk.len())
                .map(|i| LatentParams {
                    mu: mu.row(i).iter().map(|v| v.as_f64()).collect(),
                    log_var: lv.row(i).iter().map(|v| v.as_f64()).collect(),
                })
                .collect::<Vec<_>>()
        });
        let out: Vec<LatentParams> = out.into_iter().flatten().collect();
        debug_assert!(out.iter().all(|p| p.dim() == d));
        for p in &out {
            p.validate()?;
        }
        Ok(out)
    }

    pub fn decode(&self, zs: &[Vec<f64>], exec: Exec) -> Result<Vec<Spectrogram>> {
        let d = self.arch.latent_dim;
        if let Some(z) = zs.iter().find(|z| z.len() != d) {
            return Err(Error::dims("latent vector", d, z.len()));
        }
        let chunks: Vec<&[Vec<f64>]> = zs.chunks(INFER_CHUNK).collect();
        let Dims { height, width } = self.arch.dims;
        let out = exec.map(&chunks, |chunk| {
            let rows: Vec<&[f64]> = chunk.iter().map(|z| z.as_slice()).collect();
            let mut g = Graph::new();
            let z = g.input(row_batch::<T>(&rows));
            let y = self.decode_graph(&mut g, z, Mode::Eval);
            let y = g.value(y);
            (0..chunk.len())
                .map(|i| Spectrogram { height, width, data: y.row(i).iter().map(|v| v.as_f32()).collect() })
                .collect::<Vec<_>>()
        });
        let out: Vec<Spectrogram> = out.into_iter().flatten().collect();
        if out.iter().any(|s| !s.data.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("decoder output".into()));
        }
        Ok(out)
    }

    pub fn reconstruct(&self, xs: &[&Spectrogram], exec: Exec) -> Result<Vec<Spectrogram>> {
        let mus: Vec<Vec<f64>> = self.encode(xs, exec)?.into_iter().map(|p| p.mu).collect();
        self.decode(&mus, exec)
    }

    /// Discriminator logits `[n, 2]` for a latent batch.
    pub fn disc_logits(&self, zs: &[Vec<f64>]) -> Result<Tensor<T>> {
        let d = self.arch.latent_dim;
        if let Some(z) = zs.iter().find(|z| z.len() != d) {
            return Err(Error::dims("latent vector", d, z.len()));
        }
        let rows: Vec<&[f64]> = zs.iter().map(|z| z.as_slice()).collect();
        let mut g = Graph::new();
        let z = g.input(row_batch::<T>(&rows));
        let l = self.disc_graph(&mut g, z);
        Ok(g.value(l).clone())
    }

    /// TC estimate of a latent batch under this model's discriminator.
    pub fn tc_penalty(&self, zs: &[Vec<f64>]) -> Result<f64> {
        if zs.is_empty() {
            return Err(Error::Empty("latent batch"));
        }
        tc_from_logits(&self.disc_logits(zs)?)
    }

    pub fn cast<U: Element>(&self) -> VaeModel<U> {
        VaeModel {
            arch: self.arch.clone(),
            beta: self.beta,
            gamma: self.gamma,
            seed: self.seed,
            encoder_params: self.encoder_params.cast(),
            decoder_params: self.decoder_params.cast(),
            disc_params: self.disc_params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            disc: self.disc.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let desc = Descriptor {
            kind: VAE_KIND.into(),
            arch: self.arch.clone(),
            beta: self.beta,
            gamma: self.gamma,
            seed: self.seed,
        };
        let mut params = self.encoder_params.to_f32_blocks();
        params.extend(self.decoder_params.to_f32_blocks());
        params.extend(self.disc_params.to_f32_blocks());
        checkpoint::encode(&desc, &params)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (desc, params): (Descriptor, Vec<f32>) = checkpoint::decode(bytes)?;
        if desc.kind != VAE_KIND {
            return Err(Error::config(format!("checkpoint holds a `{}` model, expected `{VAE_KIND}`", desc.kind)));
        }
        let mut m = Self::new(desc.arch, desc.beta, desc.gamma, desc.seed)?;
        let expected = m.encoder_params.numel() + m.decoder_params.numel() + m.disc_params.numel();
        if params.len() != expected {
            return Err(Error::dims("checkpoint parameters", expected, params.len()));
        }
        let mut at = 0;
        for s in [&mut m.encoder_params, &mut m.decoder_params, &mut m.disc_params] {
            at += s.load_f32_blocks(&params[at..]).map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(m)
    }

    /// Checksum identifying the checkpoint this model serializes to.
    pub fn model_id(&self) -> Result<u64> {
        Ok(checkpoint::model_id(&self.to_checkpoint()?))
    }
}
