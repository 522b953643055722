use ndarray::Array2;

use super::LogMelSpectrogram;
use crate::error::{Error, Result};

/// Orthonormal DCT-II basis, `n_out x n`.
pub fn dct_basis(n_out: usize, n: usize) -> Array2<f64> {
    let nf = n as f64;
    Array2::from_shape_fn((n_out, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        scale * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / nf).cos()
    })
}

/// First `n_mfcc` orthonormal DCT-II coefficients of every log-mel frame.
pub fn mfcc(spec: &LogMelSpectrogram, n_mfcc: usize) -> Result<Array2<f64>> {
    let n_mels = spec.n_mels();
    if n_mfcc > n_mels {
        return Err(Error::invalid(format!(
            "n_mfcc {n_mfcc} exceeds the {n_mels} mel channels"
        )));
    }
    let basis = dct_basis(n_mfcc, n_mels);
    Ok(spec.frames.dot(&basis.t()))
}

/// Inverts a full-length (`n_mfcc == n_mels`) coefficient matrix.
pub fn inverse_dct(coeffs: &Array2<f64>) -> Array2<f64> {
    let n = coeffs.ncols();
    coeffs.dot(&dct_basis(n, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_from(frames: Array2<f64>) -> LogMelSpectrogram {
        let t = frames.nrows();
        LogMelSpectrogram {
            frames,
            frame_times: vec![0.0; t],
        }
    }

    #[test]
    fn constant_frame_only_dc() {
        let c = mfcc(&spec_from(Array2::from_elem((2, 80), -0.4)), 13).unwrap();
        assert!((c[[0, 0]] - (-0.4 * 80f64.sqrt())).abs() < 1e-12);
        for k in 1..13 {
            assert!(c[[0, k]].abs() < 1e-12);
        }
    }

    #[test]
    fn full_length_is_invertible() {
        let frames = Array2::from_shape_fn((3, 80), |(t, m)| ((t * 80 + m) as f64 * 0.37).sin());
        let c = mfcc(&spec_from(frames.clone()), 80).unwrap();
        let back = inverse_dct(&c);
        for (a, b) in back.iter().zip(frames.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn too_many_coefficients() {
        assert!(mfcc(&spec_from(Array2::zeros((1, 10))), 11).is_err());
    }
}
