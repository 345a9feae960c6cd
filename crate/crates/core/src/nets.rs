//! Network building blocks shared by the VAE, CVAE-GAN and classifiers.

use rand::Rng;
use serde::{Deserialize, Serialize};
use specvae_nn::{BatchNorm, Conv2d, ConvTranspose2d, Element, Graph, Linear, Mode, ParamStore, Tensor, Var};

use crate::synth::Spectrogram;

pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const PAD: usize = 2;
pub const OUT_PAD: usize = 1;

/// Stacks spectrograms into a `[n, 1, h, w]` tensor.
pub fn image_batch<T: Element>(xs: &[&Spectrogram]) -> Tensor<T> {
    let (h, w) = xs.first().map_or((0, 0), |s| (s.height, s.width));
    let mut data = Vec::with_capacity(xs.len() * h * w);
    for s in xs {
        data.extend(s.data.iter().map(|&v| T::from_f32(v)));
    }
    Tensor::new(&[xs.len(), 1, h, w], data)
}

pub fn row_batch<T: Element>(rows: &[&[f64]]) -> Tensor<T> {
    let d = rows.first().map_or(0, |r| r.len());
    Tensor::new(&[rows.len(), d], rows.iter().flat_map(|r| r.iter().map(|&v| T::c(v))).collect())
}

pub fn one_hot<T: Element>(labels: &[usize], n_classes: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * n_classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * n_classes + y] = T::one();
    }
    Tensor::new(&[labels.len(), n_classes], data)
}

/// Conv (k5, s2, p2) → BN → LeakyReLU per entry of `channels`, then a
/// linear head to `outputs`.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    blocks: Vec<(Conv2d, BatchNorm)>,
    head: Linear,
    slope: f64,
}

impl ConvEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        (h, w): (usize, usize),
        channels: &[usize],
        outputs: usize,
        bn: (f64, f64),
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let mut c_in = 1;
        let mut blocks = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            let conv = Conv2d::new(store, &format!("{prefix}.conv{i}"), c_in, c, KERNEL, STRIDE, PAD, rng);
            let norm = BatchNorm::new(store, &format!("{prefix}.bn{i}"), c, bn.0, bn.1);
            blocks.push((conv, norm));
            c_in = c;
        }
        let shrink = 1 << channels.len();
        let flat = c_in * (h / shrink) * (w / shrink);
        let head = Linear::new(store, &format!("{prefix}.head"), flat, outputs, rng);
        ConvEncoder { blocks, head, slope }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        let mut h = x;
        for (conv, norm) in &self.blocks {
            h = conv.forward(g, store, h);
            h = norm.forward(g, store, h, mode);
            h = g.leaky_relu(h, self.slope);
        }
        let h = g.flatten(h);
        self.head.forward(g, store, h)
    }
}

/// Linear projection followed by transposed-conv blocks (k5, s2, p2,
/// output pad 1) back to a single-channel image in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    stem: Linear,
    seed_shape: [usize; 3],
    blocks: Vec<(ConvTranspose2d, Option<BatchNorm>)>,
    slope: f64,
}

impl ConvDecoder {
    /// `channels` lists the encoder widths; the decoder walks them backwards.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        (h, w): (usize, usize),
        channels: &[usize],
        inputs: usize,
        bn: (f64, f64),
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let shrink = 1 << channels.len();
        let c_top = *channels.last().expect("at least one block");
        let seed_shape = [c_top, h / shrink, w / shrink];
        let stem = Linear::new(store, &format!("{prefix}.stem"), inputs, seed_shape.iter().product(), rng);
        let mut blocks = Vec::new();
        for i in (0..channels.len()).rev() {
            let c_out = if i == 0 { 1 } else { channels[i - 1] };
            let up = ConvTranspose2d::new(store, &format!("{prefix}.up{i}"), channels[i], c_out, KERNEL, STRIDE, PAD, OUT_PAD, rng);
            let norm = (i > 0).then(|| BatchNorm::new(store, &format!("{prefix}.bn{i}"), c_out, bn.0, bn.1));
            blocks.push((up, norm));
        }
        ConvDecoder { stem, seed_shape, blocks, slope }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, mode: Mode) -> Var {
        let n = g.value(z).rows();
        let h = self.stem.forward(g, store, z);
        let h = g.leaky_relu(h, self.slope);
        let [c, sh, sw] = self.seed_shape;
        let mut h = g.reshape(h, &[n, c, sh, sw]);
        for (up, norm) in &self.blocks {
            h = up.forward(g, store, h);
            match norm {
                Some(norm) => {
                    h = norm.forward(g, store, h, mode);
                    h = g.leaky_relu(h, self.slope);
                }
                None => h = g.sigmoid(h),
            }
        }
        h
    }
}

/// Fully connected stack with LeakyReLU between layers; `layers` counts
/// linear layers including the output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    slope: f64,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        inputs: usize,
        width: usize,
        layers: usize,
        outputs: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        assert!(layers >= 1);
        let mut out = Vec::with_capacity(layers);
        let mut c = inputs;
        for i in 0..layers {
            let o = if i + 1 == layers { outputs } else { width };
            out.push(Linear::new(store, &format!("{prefix}.fc{i}"), c, o, rng));
            c = o;
        }
        Mlp { layers: out, slope }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, self.slope);
            }
        }
        h
    }
}

/// Widths and block counts of a residual CNN trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualConfig {
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
}

impl ResidualConfig {
    /// 18 weight layers: stem, four stages of two basic blocks, head.
    pub fn resnet18() -> Self {
        ResidualConfig { widths: vec![64, 128, 256, 512], blocks: vec![2, 2, 2, 2] }
    }

    pub fn desk() -> Self {
        ResidualConfig { widths: vec![8, 16, 32], blocks: vec![1, 1, 1] }
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    c1: Conv2d,
    b1: BatchNorm,
    c2: Conv2d,
    b2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

/// Residual trunk ending in global average pooling: `[n,1,h,w] → [n, c]`.
#[derive(Clone, Debug)]
pub struct ResidualTrunk {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
}

impl ResidualTrunk {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ResidualConfig,
        bn: (f64, f64),
        rng: &mut R,
    ) -> Self {
        let c0 = cfg.widths[0];
        let stem = Conv2d::new(store, &format!("{prefix}.stem"), 1, c0, 3, 1, 1, rng);
        let stem_bn = BatchNorm::new(store, &format!("{prefix}.stem_bn"), c0, bn.0, bn.1);
        let mut blocks = Vec::new();
        let mut c_in = c0;
        for (s, (&c, &n)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
            for b in 0..n {
                let p = format!("{prefix}.s{s}b{b}");
                let stride = if b == 0 { 2 } else { 1 };
                let shortcut = (stride != 1 || c_in != c).then(|| {
                    (
                        Conv2d::new(store, &format!("{p}.down"), c_in, c, 1, stride, 0, rng),
                        BatchNorm::new(store, &format!("{p}.down_bn"), c, bn.0, bn.1),
                    )
                });
                blocks.push(BasicBlock {
                    c1: Conv2d::new(store, &format!("{p}.conv1"), c_in, c, 3, stride, 1, rng),
                    b1: BatchNorm::new(store, &format!("{p}.bn1"), c, bn.0, bn.1),
                    c2: Conv2d::new(store, &format!("{p}.conv2"), c, c, 3, 1, 1, rng),
                    b2: BatchNorm::new(store, &format!("{p}.bn2"), c, bn.0, bn.1),
                    shortcut,
                });
                c_in = c;
            }
        }
        ResidualTrunk { stem, stem_bn, blocks }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        let h = self.stem.forward(g, store, x);
        let h = self.stem_bn.forward(g, store, h, mode);
        let mut h = g.relu(h);
        for b in &self.blocks {
            let y = b.c1.forward(g, store, h);
            let y = b.b1.forward(g, store, y, mode);
            let y = g.relu(y);
            let y = b.c2.forward(g, store, y);
            let y = b.b2.forward(g, store, y, mode);
            let skip = match &b.shortcut {
                Some((conv, norm)) => {
                    let s = conv.forward(g, store, h);
                    norm.forward(g, store, s, mode)
                }
                None => h,
            };
            let y = g.add(y, skip);
            h = g.relu(y);
        }
        g.global_avg_pool(h)
    }
}

/// Seven 3×3 convolutions (strides 2,1,2,1,2,1,2) with LeakyReLU and a
/// linear real/fake head. The flattened last conv output is exposed as the
/// feature-matching layer.
#[derive(Clone, Debug)]
pub struct ConvDiscriminator {
    convs: Vec<Conv2d>,
    head: Linear,
    slope: f64,
}

pub const DISC_STRIDES: [usize; 7] = [2, 1, 2, 1, 2, 1, 2];

impl ConvDiscriminator {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        (h, w): (usize, usize),
        widths: &[usize; 7],
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let mut c_in = 1;
        let mut convs = Vec::new();
        for (i, (&c, &s)) in widths.iter().zip(&DISC_STRIDES).enumerate() {
            convs.push(Conv2d::new(store, &format!("{prefix}.conv{i}"), c_in, c, 3, s, 1, rng));
            c_in = c;
        }
        let flat = c_in * (h >> 4) * (w >> 4);
        let head = Linear::new(store, &format!("{prefix}.head"), flat, 1, rng);
        ConvDiscriminator { convs, head, slope }
    }

    /// Returns `(features, logit)`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, store, h);
            h = g.leaky_relu(h, self.slope);
        }
        let f = g.flatten(h);
        let logit = self.head.forward(g, store, f);
        (f, logit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_round_trip_through_encoder_and_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        let chans = [4, 8, 8];
        let enc = ConvEncoder::new(&mut s, "e", (32, 16), &chans, 6, (0.9, 1e-5), 0.2, &mut rng);
        let dec = ConvDecoder::new(&mut s, "d", (32, 16), &chans, 3, (0.9, 1e-5), 0.2, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[2, 1, 32, 16], &mut rng));
        let h = enc.forward(&mut g, &s, x, Mode::Train);
        assert_eq!(g.value(h).shape(), &[2, 6]);
        let z = g.narrow_cols(h, 0, 3);
        let y = dec.forward(&mut g, &s, z, Mode::Train);
        assert_eq!(g.value(y).shape(), &[2, 1, 32, 16]);
        assert!(g.value(y).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn residual_trunk_and_discriminator_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        let trunk = ResidualTrunk::new(&mut s, "r", &ResidualConfig::desk(), (0.9, 1e-5), &mut rng);
        let disc = ConvDiscriminator::new(&mut s, "c", (32, 32), &[4, 4, 8, 8, 8, 8, 16], 0.2, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[3, 1, 32, 32], &mut rng));
        let f = trunk.forward(&mut g, &s, x, Mode::Train);
        assert_eq!(g.value(f).shape(), &[3, 32]);
        let (feat, logit) = disc.forward(&mut g, &s, x);
        assert_eq!(g.value(feat).shape(), &[3, 16 * 2 * 2]);
        assert_eq!(g.value(logit).shape(), &[3, 1]);
    }
}
