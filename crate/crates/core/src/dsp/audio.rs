use super::{DspError, Result, Waveform};
use std::f64::consts::PI;
use std::path::Path;

/// Reads a RIFF/WAVE file (PCM 16/24/32-bit int or 32-bit float), keeps the
/// first channel and resamples to `target_rate`.
pub fn load_audio(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DspError::FileNotFound(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => DspError::Io(io),
        other => DspError::UnsupportedFormat(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
        }
        (fmt, bits) => {
            return Err(DspError::UnsupportedFormat(format!(
                "{fmt:?} sample format with {bits} bits"
            )))
        }
    }
    .map_err(|e| DspError::UnsupportedFormat(e.to_string()))?;

    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame[0].clamp(-1.0, 1.0))
        .collect();
    if mono.is_empty() {
        return Err(DspError::EmptyAudio);
    }
    let samples = resample(&mono, spec.sample_rate, target_rate);
    Waveform::new(samples, target_rate)
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => DspError::Io(io),
        other => DspError::UnsupportedFormat(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

const SINC_ZERO_CROSSINGS: f64 = 16.0;

/// Band-limited windowed-sinc resampling. Output length is
/// `round(len * to / from)`.
pub fn resample(input: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let out_len = ((input.len() as f64) * ratio).round().max(1.0) as usize;
    // Lowpass at the lower of the two Nyquist rates.
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZERO_CROSSINGS / cutoff;
    let n = input.len() as isize;

    (0..out_len)
        .map(|i| {
            let t = i as f64 / ratio;
            let lo = (t - half_width).ceil() as isize;
            let hi = (t + half_width).floor() as isize;
            let mut acc = 0.0;
            for k in lo.max(0)..=hi.min(n - 1) {
                let x = t - k as f64;
                let arg = cutoff * x;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (PI * arg).sin() / (PI * arg)
                };
                // Blackman window over [-half_width, half_width].
                let w = x / half_width;
                let window = 0.42 + 0.5 * (PI * w).cos() + 0.08 * (2.0 * PI * w).cos();
                acc += input[k as usize] * cutoff * sinc * window;
            }
            acc.clamp(-1.0, 1.0)
        })
        .collect()
}
