//! On-disk dataset layout and split helpers.
//!
//! A dataset directory holds one `NNNNN.spec` tensor file per sample (16-byte
//! header: magic `SPEC`, u32 height, u32 width, u32 version; then row-major
//! little-endian f32) and an `index.jsonl` with one record per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FrameError, Result};
use crate::synth::{InterferenceRecord, Sample, Spectrogram};

pub const SPEC_MAGIC: &[u8; 4] = b"SPEC";
pub const SPEC_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Serialize, Deserialize)]
struct IndexLine {
    file: String,
    #[serde(flatten)]
    record: InterferenceRecord,
}

pub fn encode_spectrogram(s: &Spectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * s.data.len());
    out.extend_from_slice(SPEC_MAGIC);
    out.extend_from_slice(&(s.height as u32).to_le_bytes());
    out.extend_from_slice(&(s.width as u32).to_le_bytes());
    out.extend_from_slice(&SPEC_VERSION.to_le_bytes());
    for v in &s.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_spectrogram(bytes: &[u8]) -> Result<Spectrogram> {
    if bytes.len() < 16 {
        return Err(FrameError::new("header", bytes.len(), "truncated before 16-byte header end").into());
    }
    if &bytes[..4] != SPEC_MAGIC {
        return Err(FrameError::new("magic", 0, "expected SPEC").into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (h, w, version) = (u32_at(4) as usize, u32_at(8) as usize, u32_at(12));
    if version != SPEC_VERSION {
        return Err(FrameError::new("version", 12, format!("unsupported version {version}")).into());
    }
    let need = 16 + 4 * h * w;
    if bytes.len() != need {
        return Err(FrameError::new("payload", bytes.len().min(need), format!("expected {need} bytes, found {}", bytes.len())).into());
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Spectrogram::new(h, w, data)
}

pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = fs::File::create(dir.join(INDEX_FILE))?;
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:05}.spec");
        fs::write(dir.join(&file), encode_spectrogram(&s.spectrogram))?;
        let line = serde_json::to_string(&IndexLine { file, record: s.record.clone() })?;
        writeln!(index, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let index = BufReader::new(fs::File::open(dir.join(INDEX_FILE))?);
    let mut out = Vec::new();
    for line in index.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexLine = serde_json::from_str(&line)?;
        let spectrogram = decode_spectrogram(&fs::read(dir.join(&entry.file))?)?;
        out.push(Sample { spectrogram, record: entry.record });
    }
    Ok(out)
}

/// Stratified train/test split keyed by (class, power bin).
///
/// Each cell contributes `round(test_fraction * cell_size)` test samples.
pub fn stratified_split(samples: &[Sample], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut cells: BTreeMap<(u8, i64), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let key = (s.record.class as u8, (s.record.power_db * 1000.0).round() as i64);
        cells.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in cells {
        idx.shuffle(&mut rng);
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn select<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Index of the grid value nearest to `value`.
pub fn nearest_bin(value: f64, grid: &[f64]) -> usize {
    grid.iter()
        .enumerate()
        .min_by(|a, b| (a.1 - value).abs().total_cmp(&(b.1 - value).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::exec::Exec;
    use crate::synth::{make_dataset, DatasetConfig, Dims, InterferenceClass};

    #[test]
    fn directory_round_trip_is_exact() {
        let mut cfg = DatasetConfig::desk(3);
        cfg.n_per_class = 1;
        cfg.dims = Dims::new(16, 8);
        let samples = make_dataset(&cfg, Exec::Parallel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let bytes = fs::read(dir.path().join("00000.spec")).unwrap();
        assert_eq!(&bytes[..4], b"SPEC");
        assert_eq!(bytes.len(), 16 + 4 * 16 * 8);
        assert_eq!(read_dataset(dir.path()).unwrap(), samples);
    }

    #[test]
    fn spec_file_rejections_name_the_field() {
        let s = Spectrogram::new(8, 8, vec![0.5; 64]).unwrap();
        let mut b = encode_spectrogram(&s);
        b[0] = b'X';
        assert!(matches!(decode_spectrogram(&b), Err(Error::Frame(FrameError { field: "magic", .. }))));
        let b = encode_spectrogram(&s);
        assert!(matches!(decode_spectrogram(&b[..40]), Err(Error::Frame(FrameError { field: "payload", .. }))));
    }

    #[test]
    fn split_is_stratified() {
        let samples = make_dataset(&DatasetConfig::desk(1), Exec::Parallel).unwrap();
        let (train, test) = stratified_split(&samples, 0.2, 9);
        assert_eq!((train.len(), test.len()), (600, 150));
        let test_tones = test.iter().filter(|&&i| samples[i].record.class == InterferenceClass::Tone && samples[i].record.power_db == -20.0).count();
        assert_eq!(test_tones, 5);
        assert_eq!(nearest_bin(-14.0, &[-20.0, -15.0, -10.0]), 1);
    }
}
