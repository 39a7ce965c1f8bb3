//! Binary mel cache: `CTVCMEL1`, u32 T, u32 B, then T*B little-endian f32
//! values in frame-major order.

use super::{DspError, MelConfig, MelSpectrogram, Result};
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

pub const MEL_CACHE_MAGIC: &[u8; 8] = b"CTVCMEL1";

pub fn write_mel_cache(path: impl AsRef<Path>, m: &MelSpectrogram) -> Result<()> {
    let (t, b) = m.frames.dim();
    let mut buf = Vec::with_capacity(16 + 4 * t * b);
    buf.extend_from_slice(MEL_CACHE_MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(b as u32).to_le_bytes());
    for &v in m.frames.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_mel_cache(path: impl AsRef<Path>, config: &MelConfig) -> Result<MelSpectrogram> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MEL_CACHE_MAGIC {
        return Err(DspError::CorruptCache("bad magic".into()));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let b = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if b != config.mel_bins {
        return Err(DspError::CorruptCache(format!(
            "cache has {b} bins, config expects {}",
            config.mel_bins
        )));
    }
    let payload = &bytes[16..];
    if payload.len() != 4 * t * b {
        return Err(DspError::CorruptCache(format!(
            "expected {} payload bytes, found {}",
            4 * t * b,
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let frames = Array2::from_shape_vec((t, b), values)
        .map_err(|e| DspError::CorruptCache(e.to_string()))?;
    Ok(MelSpectrogram {
        frames,
        config: config.clone(),
    })
}
