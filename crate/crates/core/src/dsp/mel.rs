use super::{DspError, MelConfig, MelSpectrogram, Result, Waveform};
use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak on the HTK mel scale, shape
/// `mel_bins x (fft_size / 2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_freq = cfg.fft_size / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((cfg.mel_bins, n_freq));
    for m in 0..cfg.mel_bins {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_freq {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Periodic Hann window of `window_length`, zero-padded and centred in
/// `fft_size`.
pub(crate) fn analysis_window(cfg: &MelConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.fft_size];
    let offset = (cfg.fft_size - cfg.window_length) / 2;
    for i in 0..cfg.window_length {
        w[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window_length as f64).cos();
    }
    w
}

/// Number of frames produced for `len` samples under centre padding.
pub(crate) fn frame_count(len: usize, cfg: &MelConfig) -> usize {
    1 + len / cfg.hop_length
}

fn reflect_pad(x: &[f64], pad: usize) -> Result<Vec<f64>> {
    if x.len() <= pad {
        return Err(DspError::AudioTooShort {
            len: x.len(),
            needed: pad,
        });
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    Ok(out)
}

/// Complex STFT, `T x (fft_size / 2 + 1)`, frames centred on multiples of
/// the hop after reflect padding by `fft_size / 2`.
pub(crate) fn stft(samples: &[f64], cfg: &MelConfig) -> Result<Array2<Complex64>> {
    let pad = cfg.fft_size / 2;
    let padded = reflect_pad(samples, pad)?;
    let n_frames = frame_count(samples.len(), cfg);
    let n_freq = cfg.fft_size / 2 + 1;
    let window = analysis_window(cfg);
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let mut out = Array2::zeros((n_frames, n_freq));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for t in 0..n_frames {
        let start = t * cfg.hop_length;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = padded.get(start + i).copied().unwrap_or(0.0);
            *b = Complex64::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_freq {
            out[[t, k]] = buf[k];
        }
    }
    Ok(out)
}

/// Inverse of [`stft`] by weighted overlap-add; returns `(T - 1) * hop`
/// samples.
pub(crate) fn istft(spec: &Array2<Complex64>, cfg: &MelConfig) -> Vec<f64> {
    let n_frames = spec.nrows();
    let n_fft = cfg.fft_size;
    let pad = n_fft / 2;
    let out_len = (n_frames - 1) * cfg.hop_length;
    let total = out_len + n_fft + cfg.hop_length;
    let window = analysis_window(cfg);
    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..n_frames {
        for k in 0..=n_fft / 2 {
            buf[k] = spec[[t, k]];
        }
        for k in 1..n_fft / 2 {
            buf[n_fft - k] = spec[[t, k]].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop_length;
        for i in 0..n_fft {
            acc[start + i] += buf[i].re / n_fft as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    (0..out_len)
        .map(|i| {
            let n = norm[i + pad];
            if n > 1e-8 {
                acc[i + pad] / n
            } else {
                0.0
            }
        })
        .collect()
}

pub fn stft_magnitude(w: &Waveform, cfg: &MelConfig) -> Result<Array2<f64>> {
    Ok(stft(&w.samples, cfg)?.mapv(|c| c.norm()))
}

/// Log-mel spectrogram: `ln(max(filterbank * |STFT|, amplitude_floor))`.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(DspError::RateMismatch {
            waveform: w.sample_rate,
            config: cfg.sample_rate,
        });
    }
    if w.len() < cfg.window_length / 2 + 1 {
        return Err(DspError::AudioTooShort {
            len: w.len(),
            needed: cfg.window_length / 2 + 1,
        });
    }
    let mag = stft_magnitude(w, cfg)?;
    let fb = mel_filterbank(cfg);
    let floor = cfg.amplitude_floor;
    let frames = mag.dot(&fb.t()).mapv(|e| e.max(floor).ln());
    Ok(MelSpectrogram {
        frames,
        config: cfg.clone(),
    })
}
