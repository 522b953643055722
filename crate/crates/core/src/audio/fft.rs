//! Iterative radix-2 decimation-in-time FFT.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// A planned transform of one power-of-two size. Twiddles and the
/// bit-reversal permutation are computed once and reused per frame.
#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Fft {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::invalid(format!("FFT size {n} is not a power of two")));
        }
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Ok(Self {
            n,
            twiddles,
            bitrev,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform, `X(k) = sum_n x[n] exp(-2 pi i k n / N)`.
    pub fn process(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n, "buffer length must match the planned size");
        for i in 0..self.n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= self.n {
            let half = size / 2;
            let stride = self.n / size;
            for start in (0..self.n).step_by(size) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            size *= 2;
        }
    }

    /// Transform of a real frame, zero-padded to the planned size.
    pub fn real(&self, frame: &[f64]) -> Result<Vec<Complex64>> {
        if frame.len() > self.n {
            return Err(Error::invalid(format!(
                "frame of {} samples does not fit a {}-point FFT",
                frame.len(),
                self.n
            )));
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n];
        for (b, &x) in buf.iter_mut().zip(frame) {
            b.re = x;
        }
        self.process(&mut buf);
        Ok(buf)
    }
}

/// One-shot transform of a real frame zero-padded to `n_fft` points.
pub fn spectrum(frame: &[f64], n_fft: usize) -> Result<Vec<Complex64>> {
    Fft::new(n_fft)?.real(frame)
}
