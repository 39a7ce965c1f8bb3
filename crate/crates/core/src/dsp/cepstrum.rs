use super::{DspError, MelSpectrogram, Result};
use ndarray::Array2;
use std::f64::consts::{LN_10, PI, SQRT_2};

/// `(10 / ln 10) * sqrt(2)`, the dB scale factor of mel-cepstral distortion.
pub const MCD_SCALE: f64 = 10.0 / LN_10 * SQRT_2;

/// Orthonormal DCT-II basis, `bins x order`.
fn dct_basis(bins: usize, order: usize) -> Array2<f64> {
    Array2::from_shape_fn((bins, order), |(n, k)| {
        let scale = if k == 0 {
            (1.0 / bins as f64).sqrt()
        } else {
            (2.0 / bins as f64).sqrt()
        };
        scale * (PI * k as f64 * (2 * n + 1) as f64 / (2 * bins) as f64).cos()
    })
}

/// Per-frame orthonormal DCT-II of the log-mel vector, coefficients
/// `0..order`.
pub fn mel_to_cepstra(m: &MelSpectrogram, order: usize) -> Result<Array2<f64>> {
    let bins = m.num_bins();
    if order > bins {
        return Err(DspError::OrderTooLarge { order, bins });
    }
    Ok(m.frames.dot(&dct_basis(bins, order)))
}

/// Inverse (DCT-III) of [`mel_to_cepstra`] back onto `bins` mel channels.
/// Missing high-order coefficients are treated as zero.
pub fn cepstra_to_mel(cepstra: &Array2<f64>, bins: usize) -> Result<Array2<f64>> {
    let order = cepstra.ncols();
    if order > bins {
        return Err(DspError::OrderTooLarge { order, bins });
    }
    Ok(cepstra.dot(&dct_basis(bins, order).t()))
}

/// Mel-cepstral distortion in dB over equal-length inputs, excluding the
/// energy coefficient.
pub fn mcd(a: &MelSpectrogram, b: &MelSpectrogram, order: usize) -> Result<f64> {
    if a.num_frames() != b.num_frames() {
        return Err(DspError::LengthMismatch(a.num_frames(), b.num_frames()));
    }
    if a.num_bins() != b.num_bins() {
        return Err(DspError::InvalidConfig(format!(
            "mel bins differ: {} vs {}",
            a.num_bins(),
            b.num_bins()
        )));
    }
    let ca = mel_to_cepstra(a, order)?;
    let cb = mel_to_cepstra(b, order)?;
    let frames = ca.nrows();
    if frames == 0 || order < 2 {
        return Ok(0.0);
    }
    let total: f64 = ca
        .rows()
        .into_iter()
        .zip(cb.rows())
        .map(|(ra, rb)| {
            (1..order)
                .map(|k| (ra[k] - rb[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(MCD_SCALE * total / frames as f64)
}

/// [`mcd`] after truncating both inputs to the shorter frame count.
pub fn mcd_truncated(a: &MelSpectrogram, b: &MelSpectrogram, order: usize) -> Result<(f64, usize)> {
    let n = a.num_frames().min(b.num_frames());
    Ok((mcd(&a.truncated(n), &b.truncated(n), order)?, n))
}
