use super::mel::{istft, mel_filterbank, stft};
use super::{MelSpectrogram, Result, Waveform};
use ndarray::Array2;
use rustfft::num_complex::Complex64;

const NNLS_ITERATIONS: usize = 200;

/// Estimates a non-negative linear magnitude spectrogram `T x (fft/2 + 1)`
/// whose mel projection matches `exp(m)`, by multiplicative NNLS updates.
pub fn mel_to_linear(m: &MelSpectrogram) -> Array2<f64> {
    let fb = mel_filterbank(&m.config);
    let target = m.frames.mapv(f64::exp);
    // Start from the transposed projection so every bin touched by a filter
    // begins positive.
    let mut mag = target.dot(&fb);
    let fb_gram = fb.t().dot(&fb);
    let numer = target.dot(&fb);
    for _ in 0..NNLS_ITERATIONS {
        let denom = mag.dot(&fb_gram);
        ndarray::Zip::from(&mut mag)
            .and(&numer)
            .and(&denom)
            .for_each(|s, &n, &d| *s *= n / (d + 1e-12));
    }
    mag
}

/// Phase reconstruction from a log-mel spectrogram. Deterministic: the
/// initial phase is zero.
pub fn griffin_lim(m: &MelSpectrogram, iterations: usize) -> Result<Waveform> {
    let cfg = &m.config;
    let iterations = iterations.max(1);
    let mag = mel_to_linear(m);
    let mut spec: Array2<Complex64> = mag.mapv(|a| Complex64::new(a, 0.0));
    let mut signal = istft(&spec, cfg);
    for _ in 0..iterations {
        let rebuilt = stft(&signal, cfg)?;
        ndarray::Zip::from(&mut spec)
            .and(&mag)
            .and(&rebuilt)
            .for_each(|s, &a, r| {
                let n = r.norm();
                *s = if n > 1e-12 {
                    r * (a / n)
                } else {
                    Complex64::new(a, 0.0)
                };
            });
        signal = istft(&spec, cfg);
    }
    for s in signal.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
    if signal.is_empty() {
        signal.push(0.0);
    }
    Waveform::new(signal, cfg.sample_rate)
}
