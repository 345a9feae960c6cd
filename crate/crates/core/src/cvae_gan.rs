//! Class-conditional VAE with a convolutional discriminator and an
//! auxiliary classifier, trained with mean feature matching.
//!
//! Prior samples are routed to the discriminator only; the classifier
//! matches features of reconstructions against real inputs per class.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use specvae_nn::{Adam, AdamConfig, Element, Graph, Linear, Mode, ParamStore, Tensor, Var};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nets::{image_batch, one_hot, row_batch, ConvDecoder, ConvDiscriminator, ResidualConfig, ResidualTrunk};
use crate::synth::{Dims, Spectrogram};
use crate::trace::LossTrace;
use crate::vae::{kl_term, recon_term, reparam_term, LatentParams, Trained, INFER_CHUNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvaeGanArch {
    pub dims: Dims,
    pub latent_dim: usize,
    pub n_classes: usize,
    pub encoder: ResidualConfig,
    /// Width of the hidden layer after the label is concatenated.
    pub enc_hidden: usize,
    /// Generator block widths, walked backwards as in the VAE decoder.
    pub channels: Vec<usize>,
    pub disc_widths: [usize; 7],
    pub classifier: ResidualConfig,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub slope: f64,
}

impl CvaeGanArch {
    pub fn desk(latent_dim: usize, n_classes: usize) -> Self {
        CvaeGanArch {
            dims: Dims::DESK,
            latent_dim,
            n_classes,
            encoder: ResidualConfig::desk(),
            enc_hidden: 64,
            channels: vec![16, 32, 64, 64, 64],
            disc_widths: [8, 8, 16, 16, 32, 32, 32],
            classifier: ResidualConfig::desk(),
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
        if self.n_classes < 2 {
            return Err(Error::Range { field: "n_classes", msg: "need at least 2 classes".into() });
        }
        if self.channels.is_empty() || self.encoder.widths.is_empty() || self.classifier.widths.is_empty() {
            return Err(Error::config("channel lists must be non-empty"));
        }
        let shrink = (1usize << self.channels.len()).max(16);
        if self.dims.height % shrink != 0 || self.dims.width % shrink != 0 {
            return Err(Error::config(format!("dims {} must be divisible by {shrink}", self.dims)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvaeGanWeights {
    pub w_recon: f64,
    pub w_kl: f64,
    /// Non-saturating adversarial loss on reconstructions and prior samples.
    pub w_gan: f64,
    /// Mean feature matching against the discriminator's last conv layer.
    pub w_fm: f64,
    /// Per-class mean feature matching against the classifier trunk.
    pub w_cls: f64,
}

impl Default for CvaeGanWeights {
    fn default() -> Self {
        CvaeGanWeights { w_recon: 1.0, w_kl: 0.1, w_gan: 0.05, w_fm: 1.0, w_cls: 1.0 }
    }
}

impl CvaeGanWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_recon, self.w_kl, self.w_gan, self.w_fm, self.w_cls];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Range { field: "loss weights", msg: format!("must be finite and >= 0, got {all:?}") });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeGanConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub cls_lr: f64,
    pub weights: CvaeGanWeights,
    /// When false the discriminator and classifier are neither trained nor
    /// used: a plain conditional VAE.
    pub adversarial: bool,
    pub seed: u64,
}

impl Default for CvaeGanConfig {
    fn default() -> Self {
        CvaeGanConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            disc_lr: 1e-4,
            cls_lr: 1e-3,
            weights: CvaeGanWeights::default(),
            adversarial: true,
            seed: 0,
        }
    }
}

impl CvaeGanConfig {
    pub fn plain_cvae() -> Self {
        CvaeGanConfig { adversarial: false, ..Default::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    arch: CvaeGanArch,
    weights: CvaeGanWeights,
    seed: u64,
}

pub const CVAE_GAN_KIND: &str = "cvae_gan";

#[derive(Clone, Debug)]
pub struct CvaeGanModel<T: Element = f32> {
    pub arch: CvaeGanArch,
    pub weights: CvaeGanWeights,
    pub seed: u64,
    pub encoder_params: ParamStore<T>,
    pub generator_params: ParamStore<T>,
    pub disc_params: ParamStore<T>,
    pub classifier_params: ParamStore<T>,
    enc_trunk: ResidualTrunk,
    enc_hidden: Linear,
    enc_out: Linear,
    generator: ConvDecoder,
    disc: ConvDiscriminator,
    cls_trunk: ResidualTrunk,
    cls_head: Linear,
}

/// `0.5 * || mean(a) - mean(b) ||^2` over the batch dimension.
pub fn mean_feature_distance<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let ma = g.mean_rows(a);
    let mb = g.mean_rows(b);
    let d = g.sub(ma, mb);
    let s = g.square(d);
    let s = g.sum_all(s);
    g.scale(s, 0.5)
}

/// Class-wise [`mean_feature_distance`], averaged over classes present.
pub fn class_feature_distance<T: Element>(g: &mut Graph<T>, a: Var, b: Var, labels: &[usize], n_classes: usize) -> Var {
    let mut terms = Vec::new();
    for c in 0..n_classes {
        let idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect();
        if idx.is_empty() {
            continue;
        }
        let ia = g.index_rows(a, &idx);
        let ib = g.index_rows(b, &idx);
        terms.push(mean_feature_distance(g, ia, ib));
    }
    let n = terms.len().max(1);
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / n as f64)
}

impl<T: Element> CvaeGanModel<T> {
    pub fn new(arch: CvaeGanArch, weights: CvaeGanWeights, seed: u64) -> Result<Self> {
        arch.validate()?;
        weights.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bn = (arch.bn_momentum, arch.bn_eps);
        let (h, w) = (arch.dims.height, arch.dims.width);
        let (d, k) = (arch.latent_dim, arch.n_classes);
        let mut enc = ParamStore::new();
        let enc_trunk = ResidualTrunk::new(&mut enc, "enc", &arch.encoder, bn, &mut rng);
        let enc_hidden = Linear::new(&mut enc, "enc.hidden", arch.encoder.out_channels() + k, arch.enc_hidden, &mut rng);
        let enc_out = Linear::new(&mut enc, "enc.out", arch.enc_hidden, 2 * d, &mut rng);
        let mut gen = ParamStore::new();
        let generator = ConvDecoder::new(&mut gen, "gen", (h, w), &arch.channels, d + k, bn, arch.slope, &mut rng);
        let mut dis = ParamStore::new();
        let disc = ConvDiscriminator::new(&mut dis, "disc", (h, w), &arch.disc_widths, arch.slope, &mut rng);
        let mut cls = ParamStore::new();
        let cls_trunk = ResidualTrunk::new(&mut cls, "cls", &arch.classifier, bn, &mut rng);
        let cls_head = Linear::new(&mut cls, "cls.head", arch.classifier.out_channels(), k, &mut rng);
        Ok(CvaeGanModel {
            arch,
            weights,
            seed,
            encoder_params: enc,
            generator_params: gen,
            disc_params: dis,
            classifier_params: cls,
            enc_trunk,
            enc_hidden,
            enc_out,
            generator,
            disc,
            cls_trunk,
            cls_head,
        })
    }

    pub fn dims(&self) -> Dims {
        self.arch.dims
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&y| y >= self.arch.n_classes) {
            Some(y) => Err(Error::UnknownClass(format!("class index {y} (model has {})", self.arch.n_classes))),
            None => Ok(()),
        }
    }

    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var, y: Var, mode: Mode) -> (Var, Var) {
        let s = &self.encoder_params;
        let f = self.enc_trunk.forward(g, s, x, mode);
        let f = g.concat_cols(f, y);
        let h = self.enc_hidden.forward(g, s, f);
        let h = g.leaky_relu(h, self.arch.slope);
        let o = self.enc_out.forward(g, s, h);
        let d = self.arch.latent_dim;
        (g.narrow_cols(o, 0, d), g.narrow_cols(o, d, d))
    }

    pub fn generate_graph(&self, g: &mut Graph<T>, z: Var, y: Var, mode: Mode) -> Var {
        let zy = g.concat_cols(z, y);
        self.generator.forward(g, &self.generator_params, zy, mode)
    }

    /// Returns `(features, logits)` of the auxiliary classifier.
    pub fn classifier_graph(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> (Var, Var) {
        let f = self.cls_trunk.forward(g, &self.classifier_params, x, mode);
        let l = self.cls_head.forward(g, &self.classifier_params, f);
        (f, l)
    }

    pub fn disc_graph(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        self.disc.forward(g, &self.disc_params, x)
    }

    pub fn cond_encode(&self, xs: &[&Spectrogram], labels: &[usize], exec: Exec) -> Result<Vec<LatentParams>> {
        if xs.len() != labels.len() {
            return Err(Error::dims("labels", xs.len(), labels.len()));
        }
        self.check_labels(labels)?;
        if let Some(x) = xs.iter().find(|x| x.dims() != self.arch.dims) {
            return Err(Error::dims("encoder input", self.arch.dims, x.dims()));
        }
        let idx: Vec<usize> = (0..xs.len()).collect();
        let chunks: Vec<&[usize]> = idx.chunks(INFER_CHUNK).collect();
        let out = exec.map(&chunks, |chunk| {
            let batch: Vec<&Spectrogram> = chunk.iter().map(|&i| xs[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.input(image_batch::<T>(&batch));
            let y = g.input(one_hot::<T>(&ys, self.arch.n_classes));
            let (mu, lv) = self.encode_graph(&mut g, x, y, Mode::Eval);
            let (mu, lv) = (g.value(mu), g.value(lv));
            (0..chunk.len())
                .map(|i| LatentParams {
                    mu: mu.row(i).iter().map(|v| v.as_f64()).collect(),
                    log_var: lv.row(i).iter().map(|v| v.as_f64()).collect(),
                })
                .collect::<Vec<_>>()
        });
        let out: Vec<LatentParams> = out.into_iter().flatten().collect();
        for p in &out {
            p.validate()?;
        }
        Ok(out)
    }

    pub fn generate(&self, zs: &[Vec<f64>], labels: &[usize], exec: Exec) -> Result<Vec<Spectrogram>> {
        if zs.len() != labels.len() {
            return Err(Error::dims("labels", zs.len(), labels.len()));
        }
        self.check_labels(labels)?;
        let d = self.arch.latent_dim;
        if let Some(z) = zs.iter().find(|z| z.len() != d) {
            return Err(Error::dims("latent vector", d, z.len()));
        }
        let idx: Vec<usize> = (0..zs.len()).collect();
        let chunks: Vec<&[usize]> = idx.chunks(INFER_CHUNK).collect();
        let Dims { height, width } = self.arch.dims;
        let out = exec.map(&chunks, |chunk| {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| zs[i].as_slice()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let z = g.input(row_batch::<T>(&rows));
            let y = g.input(one_hot::<T>(&ys, self.arch.n_classes));
            let x = self.generate_graph(&mut g, z, y, Mode::Eval);
            let x = g.value(x);
            (0..chunk.len())
                .map(|i| Spectrogram { height, width, data: x.row(i).iter().map(|v| v.as_f32()).collect() })
                .collect::<Vec<_>>()
        });
        let out: Vec<Spectrogram> = out.into_iter().flatten().collect();
        if out.iter().any(|s| !s.data.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("generator output".into()));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let desc = Descriptor { kind: CVAE_GAN_KIND.into(), arch: self.arch.clone(), weights: self.weights, seed: self.seed };
        let mut params = Vec::new();
        for s in [&self.encoder_params, &self.generator_params, &self.disc_params, &self.classifier_params] {
            params.extend(s.to_f32_blocks());
        }
        checkpoint::encode(&desc, &params)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (desc, params): (Descriptor, Vec<f32>) = checkpoint::decode(bytes)?;
        if desc.kind != CVAE_GAN_KIND {
            return Err(Error::config(format!("checkpoint holds a `{}` model, expected `{CVAE_GAN_KIND}`", desc.kind)));
        }
        let mut m = Self::new(desc.arch, desc.weights, desc.seed)?;
        let stores = [&mut m.encoder_params, &mut m.generator_params, &mut m.disc_params, &mut m.classifier_params];
        let expected: usize = stores.iter().map(|s| s.numel()).sum();
        if params.len() != expected {
            return Err(Error::dims("checkpoint parameters", expected, params.len()));
        }
        let mut at = 0;
        for s in stores {
            at += s.load_f32_blocks(&params[at..]).map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(m)
    }

    pub fn model_id(&self) -> Result<u64> {
        Ok(checkpoint::model_id(&self.to_checkpoint()?))
    }
}

pub const CVAE_GAN_TRACE: [&str; 8] = ["recon", "kl", "gan", "fm", "cls_fm", "total", "disc", "cls"];

fn scalar<T: Element>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].as_f64()
}

/// Per batch: encoder/generator step, then discriminator step (real vs.
/// reconstructions and prior samples), then classifier step on real data.
pub fn train_cvae_gan(data: &[&Spectrogram], labels: &[usize], arch: &CvaeGanArch, cfg: &CvaeGanConfig) -> Result<Trained<CvaeGanModel>> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.epochs == 0 || cfg.batch_size < 2 {
        return Err(Error::config("need epochs >= 1 and batch_size >= 2"));
    }
    let mut model = CvaeGanModel::<f32>::new(arch.clone(), cfg.weights, cfg.seed)?;
    if labels.len() != data.len() {
        return Err(Error::dims("labels", data.len(), labels.len()));
    }
    model.check_labels(labels)?;
    if let Some(x) = data.iter().find(|x| x.dims() != arch.dims) {
        return Err(Error::dims("training input", arch.dims, x.dims()));
    }
    let (d, k) = (arch.latent_dim, arch.n_classes);
    let w = cfg.weights;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut prior_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    prior_rng.set_stream(2);
    let vae_opt = AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut opt_e = Adam::new(vae_opt, &model.encoder_params);
    let mut opt_g = Adam::new(vae_opt, &model.generator_params);
    let mut opt_disc = Adam::new(AdamConfig { lr: cfg.disc_lr, beta1: 0.5, beta2: 0.999, eps: 1e-8 }, &model.disc_params);
    let mut opt_cls = Adam::new(AdamConfig { lr: cfg.cls_lr, ..AdamConfig::default() }, &model.classifier_params);
    let mut trace = LossTrace::new(&CVAE_GAN_TRACE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 8];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let b = chunk.len();
            let batch: Vec<&Spectrogram> = chunk.iter().map(|&i| data[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let x_t = image_batch::<f32>(&batch);
            let y_t = one_hot::<f32>(&ys, k);
            let noise = Tensor::randn(&[b, d], &mut rng);

            let mut g = Graph::new();
            g.freeze(&model.disc_params);
            g.freeze(&model.classifier_params);
            let x = g.input(x_t.clone());
            let y = g.input(y_t.clone());
            let (mu, lv) = model.encode_graph(&mut g, x, y, Mode::Train);
            let z = reparam_term(&mut g, mu, lv, noise);
            // Prior pass first so the running statistics end up from the reconstruction pass.
            let x_p = cfg.adversarial.then(|| {
                let zp = g.input(Tensor::randn(&[b, d], &mut prior_rng));
                model.generate_graph(&mut g, zp, y, Mode::Train)
            });
            let x_r = model.generate_graph(&mut g, z, y, Mode::Train);
            let recon = recon_term(&mut g, x, x_r);
            let kl = kl_term(&mut g, mu, lv);
            let t1 = g.scale(recon, w.w_recon);
            let t2 = g.scale(kl, w.w_kl);
            let mut total = g.add(t1, t2);
            let (mut gan_v, mut fm_v, mut cls_v) = (0.0, 0.0, 0.0);
            if let Some(x_p) = x_p {
                let (f_real, _) = model.disc_graph(&mut g, x);
                let (f_r, l_r) = model.disc_graph(&mut g, x_r);
                let (f_p, l_p) = model.disc_graph(&mut g, x_p);
                let ones = vec![1.0f32; b];
                let a = g.bce_with_logits(l_r, &ones);
                let c = g.bce_with_logits(l_p, &ones);
                let gan = g.add(a, c);
                let a = mean_feature_distance(&mut g, f_real, f_r);
                let c = mean_feature_distance(&mut g, f_real, f_p);
                let fm = g.add(a, c);
                let (c_real, _) = model.classifier_graph(&mut g, x, Mode::Train);
                let (c_r, _) = model.classifier_graph(&mut g, x_r, Mode::Train);
                let cls_fm = class_feature_distance(&mut g, c_real, c_r, &ys, k);
                gan_v = scalar(&g, gan);
                fm_v = scalar(&g, fm);
                cls_v = scalar(&g, cls_fm);
                for (v, wt) in [(gan, w.w_gan), (fm, w.w_fm), (cls_fm, w.w_cls)] {
                    let s = g.scale(v, wt);
                    total = g.add(total, s);
                }
            }
            let gen_row = [scalar(&g, recon), scalar(&g, kl), gan_v, fm_v, cls_v, scalar(&g, total)];
            for (name, v) in CVAE_GAN_TRACE.iter().zip(gen_row) {
                if !v.is_finite() {
                    return Err(Error::Diverged { epoch, term: name.to_string(), trace: Box::new(trace) });
                }
            }
            g.backward(total);
            let ge = g.grads_for(&model.encoder_params);
            let gg = g.grads_for(&model.generator_params);
            opt_e.step(&mut model.encoder_params, &ge);
            opt_g.step(&mut model.generator_params, &gg);
            g.commit_stats(&mut model.encoder_params);
            g.commit_stats(&mut model.generator_params);
            let fakes = x_p.map(|x_p| (g.value(x_r).clone(), g.value(x_p).clone()));
            drop(g);

            let (mut disc_v, mut cls_loss_v) = (0.0, 0.0);
            if let Some((fr, fp)) = fakes {
                let mut g = Graph::new();
                let xr = g.input(x_t.clone());
                let xf = g.input(fr);
                let xp = g.input(fp);
                let (_, l_real) = model.disc_graph(&mut g, xr);
                let (_, l_f) = model.disc_graph(&mut g, xf);
                let (_, l_p) = model.disc_graph(&mut g, xp);
                let real = g.bce_with_logits(l_real, &vec![1.0; b]);
                let f1 = g.bce_with_logits(l_f, &vec![0.0; b]);
                let f2 = g.bce_with_logits(l_p, &vec![0.0; b]);
                let fake = g.add(f1, f2);
                let fake = g.scale(fake, 0.5);
                let loss = g.add(real, fake);
                disc_v = scalar(&g, loss);
                g.backward(loss);
                let gr = g.grads_for(&model.disc_params);
                opt_disc.step(&mut model.disc_params, &gr);

                let mut g = Graph::new();
                let xr = g.input(x_t);
                let (_, logits) = model.classifier_graph(&mut g, xr, Mode::Train);
                let loss = g.cross_entropy(logits, &ys);
                cls_loss_v = scalar(&g, loss);
                g.backward(loss);
                let gr = g.grads_for(&model.classifier_params);
                opt_cls.step(&mut model.classifier_params, &gr);
                g.commit_stats(&mut model.classifier_params);
                for (name, v) in [("disc", disc_v), ("cls", cls_loss_v)] {
                    if !v.is_finite() {
                        return Err(Error::Diverged { epoch, term: name.into(), trace: Box::new(trace) });
                    }
                }
            }
            for (s, v) in sums.iter_mut().zip(gen_row.into_iter().chain([disc_v, cls_loss_v])) {
                *s += v;
            }
            batches += 1;
        }
        trace.push(sums.iter().map(|s| s / batches.max(1) as f64).collect());
    }
    Ok(Trained { model, trace })
}
