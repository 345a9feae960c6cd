//! Model checkpoint container.
//!
//! Layout: magic `VCKP`, u32 version, u32 descriptor length, JSON
//! architecture descriptor, u64 parameter count, then little-endian f32
//! parameter blocks in declaration order.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{FrameError, Result};

pub const CKPT_MAGIC: &[u8; 4] = b"VCKP";
pub const CKPT_VERSION: u32 = 1;

pub fn encode<D: Serialize>(descriptor: &D, params: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(descriptor)?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * params.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<D: DeserializeOwned>(bytes: &[u8]) -> Result<(D, Vec<f32>)> {
    let need = |field: &'static str, at: usize, n: usize| -> Result<()> {
        if bytes.len() < at + n {
            return Err(FrameError::new(field, bytes.len(), format!("truncated, need {} bytes", at + n)).into());
        }
        Ok(())
    };
    need("magic", 0, 12)?;
    if &bytes[..4] != CKPT_MAGIC {
        return Err(FrameError::new("magic", 0, "expected VCKP").into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(FrameError::new("version", 4, format!("unsupported version {version}")).into());
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    need("descriptor", 12, json_len + 8)?;
    let descriptor = serde_json::from_slice(&bytes[12..12 + json_len])?;
    let at = 12 + json_len;
    let count = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    let body = &bytes[at + 8..];
    if body.len() != 4 * count {
        return Err(FrameError::new("params", at + 8, format!("expected {} bytes, found {}", 4 * count, body.len())).into());
    }
    let params = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((descriptor, params))
}

/// First eight bytes of the SHA-256 digest, little-endian.
pub fn model_id(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejections() {
        let desc = serde_json::json!({"kind": "x", "d": 3});
        let params = [1.0f32, -2.5, f32::MIN_POSITIVE];
        let bytes = encode(&desc, &params).unwrap();
        let (d, p): (serde_json::Value, Vec<f32>) = decode(&bytes).unwrap();
        assert_eq!(d, desc);
        assert_eq!(p, params);
        assert!(decode::<serde_json::Value>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<serde_json::Value>(&bad).is_err());
        assert_ne!(model_id(&bytes), model_id(&bad));
    }
}
