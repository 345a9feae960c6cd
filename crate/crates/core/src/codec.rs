//! Latent codes as a lossy compression format, and the `LATC` wire frame.
//!
//! Frame layout (little-endian, 20-byte header):
//!
//! | bytes | field |
//! |---|---|
//! | 0..4 | magic `LATC` |
//! | 4 | version |
//! | 5 | mode |
//! | 6..8 | u16 latent dim `d` |
//! | 8..10 | u16 source height |
//! | 10..12 | u16 source width |
//! | 12..20 | u64 model id |
//! | 20.. | payload, f32 × (d or 2d) |
//!
//! A file of concatenated frames is a valid stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FrameError, Result};
use crate::exec::Exec;
use crate::synth::{Dims, Spectrogram};
use crate::vae::{reparameterize, LatentParams, VaeModel};

pub const LATC_MAGIC: &[u8; 4] = b"LATC";
pub const LATC_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
/// Floor applied to `log_var` before sampling in [`LatentMode::Reparam`].
pub const MIN_LOG_VAR: f64 = -20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    Mu = 0,
    /// `mu ⊕ sigma`, sigma stored as a standard deviation.
    MuConcatSigma = 1,
    Reparam = 2,
}

impl LatentMode {
    pub const ALL: [LatentMode; 3] = [LatentMode::Mu, LatentMode::MuConcatSigma, LatentMode::Reparam];

    pub fn payload_len(self, d: usize) -> usize {
        match self {
            LatentMode::MuConcatSigma => 2 * d,
            _ => d,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| *m as u8 == b)
    }
}

impl std::str::FromStr for LatentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu" => Ok(LatentMode::Mu),
            "mu_concat_sigma" | "mu-sigma" => Ok(LatentMode::MuConcatSigma),
            "reparam" => Ok(LatentMode::Reparam),
            _ => Err(Error::config(format!("unknown latent mode `{s}` (mu, mu_concat_sigma, reparam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub payload: Vec<f32>,
    pub mode: LatentMode,
    pub source_dims: Dims,
    pub model_id: u64,
}

impl LatentCode {
    pub fn latent_dim(&self) -> usize {
        match self.mode {
            LatentMode::MuConcatSigma => self.payload.len() / 2,
            _ => self.payload.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.payload.is_empty() {
            return Err(Error::Empty("payload"));
        }
        if self.mode == LatentMode::MuConcatSigma && self.payload.len() % 2 != 0 {
            return Err(Error::dims("mu_concat_sigma payload", "even length", self.payload.len()));
        }
        if self.latent_dim() > u16::MAX as usize {
            return Err(Error::Range { field: "latent_dim", msg: format!("{} exceeds u16", self.latent_dim()) });
        }
        if self.source_dims.height > u16::MAX as usize || self.source_dims.width > u16::MAX as usize {
            return Err(Error::Range { field: "source_dims", msg: format!("{} exceeds u16", self.source_dims) });
        }
        if !self.payload.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("payload".into()));
        }
        Ok(())
    }

    pub fn compression_rate(&self) -> Result<f64> {
        compression_rate(self.source_dims, self.payload.len())
    }
}

/// Raw element count over payload element count.
pub fn compression_rate(source_dims: Dims, payload_len: usize) -> Result<f64> {
    if payload_len == 0 {
        return Err(Error::Range { field: "payload_len", msg: "must be at least 1".into() });
    }
    Ok(source_dims.len() as f64 / payload_len as f64)
}

/// Builds codes from posterior parameters. Sample `i` draws its
/// reparameterization noise from stream `i` of `noise_seed`.
pub fn compress_params(params: &[LatentParams], source_dims: Dims, model_id: u64, mode: LatentMode, noise_seed: u64) -> Result<Vec<LatentCode>> {
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.validate()?;
            let payload: Vec<f64> = match mode {
                LatentMode::Mu => p.mu.clone(),
                LatentMode::MuConcatSigma => p.mu.iter().copied().chain(p.sigma()).collect(),
                LatentMode::Reparam => {
                    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                    rng.set_stream(i as u64);
                    let noise: Vec<f64> = (0..p.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let clamped = LatentParams { mu: p.mu.clone(), log_var: p.log_var.iter().map(|v| v.max(MIN_LOG_VAR)).collect() };
                    reparameterize(&clamped, &noise)?
                }
            };
            let code = LatentCode { payload: payload.iter().map(|&v| v as f32).collect(), mode, source_dims, model_id };
            code.validate()?;
            Ok(code)
        })
        .collect()
}

pub fn compress(model: &VaeModel, xs: &[&Spectrogram], mode: LatentMode, noise_seed: u64, exec: Exec) -> Result<Vec<LatentCode>> {
    let params = model.encode(xs, exec)?;
    compress_params(&params, model.dims(), model.model_id()?, mode, noise_seed)
}

pub fn serialize(code: &LatentCode) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * code.payload.len());
    out.extend_from_slice(LATC_MAGIC);
    out.push(LATC_VERSION);
    out.push(code.mode as u8);
    out.extend_from_slice(&(code.latent_dim() as u16).to_le_bytes());
    out.extend_from_slice(&(code.source_dims.height as u16).to_le_bytes());
    out.extend_from_slice(&(code.source_dims.width as u16).to_le_bytes());
    out.extend_from_slice(&code.model_id.to_le_bytes());
    for v in &code.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses one frame from the front of `bytes`, returning it and the number
/// of bytes consumed. `base` offsets reported positions within a stream.
fn parse_frame(bytes: &[u8], base: usize) -> std::result::Result<(LatentCode, usize), FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::new("header", base + bytes.len(), format!("truncated: {} of {HEADER_LEN} header bytes", bytes.len())));
    }
    if &bytes[..4] != LATC_MAGIC {
        return Err(FrameError::new("magic", base, "expected LATC"));
    }
    if bytes[4] != LATC_VERSION {
        return Err(FrameError::new("version", base + 4, format!("unsupported version {}", bytes[4])));
    }
    let mode = LatentMode::from_byte(bytes[5]).ok_or_else(|| FrameError::new("mode", base + 5, format!("unknown mode {}", bytes[5])))?;
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let d = u16_at(6);
    if d == 0 {
        return Err(FrameError::new("d", base + 6, "latent dim is zero"));
    }
    let source_dims = Dims::new(u16_at(8), u16_at(10));
    let model_id = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let n = mode.payload_len(d);
    let end = HEADER_LEN + 4 * n;
    if bytes.len() < end {
        return Err(FrameError::new("payload", base + bytes.len(), format!("truncated: frame needs {end} bytes, {} available", bytes.len())));
    }
    let mut payload = Vec::with_capacity(n);
    for (k, c) in bytes[HEADER_LEN..end].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(FrameError::new("payload", base + HEADER_LEN + 4 * k, "non-finite payload"));
        }
        payload.push(v);
    }
    Ok((LatentCode { payload, mode, source_dims, model_id }, end))
}

/// Exact inverse of [`serialize`]; `bytes` must hold exactly one frame.
pub fn deserialize(bytes: &[u8]) -> Result<LatentCode> {
    let (code, used) = parse_frame(bytes, 0)?;
    if used != bytes.len() {
        return Err(FrameError::new("length", used, format!("{} trailing bytes after frame", bytes.len() - used)).into());
    }
    Ok(code)
}

pub fn write_stream(codes: &[LatentCode]) -> Vec<u8> {
    codes.iter().flat_map(serialize).collect()
}

pub fn read_stream(bytes: &[u8]) -> Result<Vec<LatentCode>> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (code, used) = parse_frame(&bytes[at..], at)?;
        out.push(code);
        at += used;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code(mode: LatentMode, payload: Vec<f32>) -> LatentCode {
        LatentCode { payload, mode, source_dims: Dims::DESK, model_id: 0x0123_4567_89ab_cdef }
    }

    #[test]
    fn rates() {
        assert_eq!(compression_rate(Dims::new(512, 256), 16).unwrap(), 8192.0);
        assert_eq!(compression_rate(Dims::new(512, 256), 256).unwrap(), 512.0);
        assert_eq!(compression_rate(Dims::new(1024, 32), 32).unwrap(), 1024.0);
        assert!(compression_rate(Dims::DESK, 0).is_err());
    }

    #[test]
    fn compress_modes() {
        let p = vec![LatentParams::new((0..16).map(|i| i as f64 * 0.1).collect(), vec![0.5; 16]).unwrap()];
        let mu = compress_params(&p, Dims::DESK, 1, LatentMode::Mu, 0).unwrap();
        let ms = compress_params(&p, Dims::DESK, 1, LatentMode::MuConcatSigma, 0).unwrap();
        assert_eq!(mu[0].payload.len(), 16);
        assert_eq!(ms[0].payload.len(), 32);
        assert_eq!(ms[0].latent_dim(), 16);
        assert!((ms[0].payload[20] as f64 - 0.25f64.exp()).abs() < 1e-6);
        assert_eq!(mu[0].compression_rate().unwrap(), 2.0 * ms[0].compression_rate().unwrap());
        let r1 = compress_params(&p, Dims::DESK, 1, LatentMode::Reparam, 5).unwrap();
        assert_eq!(r1, compress_params(&p, Dims::DESK, 1, LatentMode::Reparam, 5).unwrap());
        assert_ne!(r1, compress_params(&p, Dims::DESK, 1, LatentMode::Reparam, 6).unwrap());
        assert_eq!(r1[0].compression_rate().unwrap(), mu[0].compression_rate().unwrap());
    }

    #[test]
    fn reparam_with_vanishing_variance_returns_mean() {
        let mu: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0) * 0.3).collect();
        let p = vec![LatentParams::new(mu.clone(), vec![-60.0; 16]).unwrap()];
        let c = compress_params(&p, Dims::DESK, 1, LatentMode::Reparam, 11).unwrap();
        for (a, b) in c[0].payload.iter().zip(&mu) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    #[test]
    fn frame_length_and_field_errors() {
        let c = code(LatentMode::Mu, vec![0.5; 16]);
        let bytes = serialize(&c);
        assert_eq!(bytes.len(), 84);
        assert_eq!(deserialize(&bytes).unwrap(), c);
        let field = |b: &[u8]| match deserialize(b).unwrap_err() {
            Error::Frame(f) => f,
            e => panic!("unexpected {e}"),
        };
        assert_eq!(field(&bytes[..50]).field, "payload");
        assert_eq!(field(&bytes[..10]).field, "header");
        let mut bad = bytes.clone();
        bad[5] = 255;
        let f = field(&bad);
        assert_eq!(f.field, "mode");
        assert!(f.msg.contains("unknown mode"));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert_eq!(field(&bad).field, "magic");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(field(&bad).field, "version");
        let mut bad = bytes.clone();
        bad[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(field(&bad).msg.contains("non-finite payload"));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(field(&long).field, "length");
    }

    #[test]
    fn stream_of_mixed_frames() {
        let cs = vec![code(LatentMode::Mu, vec![1.0; 4]), code(LatentMode::MuConcatSigma, vec![2.0; 8]), code(LatentMode::Reparam, vec![-3.0; 2])];
        let s = write_stream(&cs);
        assert_eq!(read_stream(&s).unwrap(), cs);
        match read_stream(&s[..s.len() - 3]).unwrap_err() {
            Error::Frame(f) => assert!(f.offset >= 20 + 16 + 20 + 32),
            e => panic!("{e}"),
        }
    }

    fn arb_code() -> impl Strategy<Value = LatentCode> {
        (0u8..3, 1usize..64, any::<u64>(), 8usize..2048, 8usize..2048).prop_flat_map(|(m, d, id, h, w)| {
            let mode = LatentMode::from_byte(m).unwrap();
            prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL, mode.payload_len(d))
                .prop_map(move |payload| LatentCode { payload, mode, source_dims: Dims::new(h, w), model_id: id })
        })
    }

    proptest! {
        #[test]
        fn serialize_round_trips_bitwise(c in arb_code()) {
            let bytes = serialize(&c);
            prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * c.payload.len());
            let back = deserialize(&bytes).unwrap();
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.payload), bits(&c.payload));
            prop_assert_eq!(serialize(&back), bytes);
        }
    }
}
