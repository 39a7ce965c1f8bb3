//! Audio front-end: WAV ingestion, log-mel extraction, Griffin-Lim
//! resynthesis and the mel-cepstral distortion metric.

mod audio;
mod cache;
mod cepstrum;
mod griffin_lim;
mod mel;

pub use audio::{load_audio, resample, write_wav};
pub use cache::{read_mel_cache, write_mel_cache, MEL_CACHE_MAGIC};
pub use cepstrum::{cepstra_to_mel, mcd, mcd_truncated, mel_to_cepstra, MCD_SCALE};
pub use griffin_lim::{griffin_lim, mel_to_linear};
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, stft_magnitude};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("audio file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("waveform rate {waveform} Hz does not match mel config rate {config} Hz")]
    RateMismatch { waveform: u32, config: u32 },
    #[error("audio too short: {len} samples, need more than {needed}")]
    AudioTooShort { len: usize, needed: usize },
    #[error("cepstral order {order} exceeds mel bins {bins}")]
    OrderTooLarge { order: usize, bins: usize },
    #[error("frame count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid mel config: {0}")]
    InvalidConfig(String),
    #[error("corrupt mel cache: {0}")]
    CorruptCache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono audio with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::UnsupportedFormat("sample rate is zero".into()));
        }
        if samples.is_empty() {
            return Err(DspError::EmptyAudio);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::UnsupportedFormat("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop_length: usize,
    pub window_length: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub amplitude_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 1024,
            hop_length: 256,
            window_length: 1024,
            mel_bins: 80,
            fmin: 0.0,
            fmax: 8000.0,
            amplitude_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DspError::InvalidConfig(msg.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop_length == 0 || self.hop_length > self.window_length {
            return bad("need 0 < hop_length <= window_length");
        }
        if self.window_length > self.fft_size {
            return bad("window_length must not exceed fft_size");
        }
        if self.mel_bins == 0 {
            return bad("mel_bins must be at least 1");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0)
        {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.amplitude_floor > 0.0) {
            return bad("amplitude_floor must be positive");
        }
        Ok(())
    }

    pub fn log_floor(&self) -> f64 {
        self.amplitude_floor.ln()
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }
}

/// T x B matrix of natural-log mel amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    /// Wraps a frame matrix, clamping entries to the configured log floor.
    pub fn from_frames(mut frames: Array2<f64>, config: MelConfig) -> Result<Self> {
        if frames.ncols() != config.mel_bins {
            return Err(DspError::InvalidConfig(format!(
                "matrix has {} columns, config has {} mel bins",
                frames.ncols(),
                config.mel_bins
            )));
        }
        let floor = config.log_floor();
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(DspError::InvalidConfig("non-finite mel value".into()));
        }
        frames.mapv_inplace(|v| v.max(floor));
        Ok(Self { frames, config })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }

    /// Copy of frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> MelSpectrogram {
        MelSpectrogram {
            frames: self
                .frames
                .slice(ndarray::s![start..start + len, ..])
                .to_owned(),
            config: self.config.clone(),
        }
    }

    /// Truncates to the first `len` frames.
    pub fn truncated(&self, len: usize) -> MelSpectrogram {
        self.slice_frames(0, len.min(self.num_frames()))
    }
}
