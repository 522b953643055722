//! DSP front end: preemphasis, framing, Hamming window, FFT, mel filterbank,
//! log compression, normalization and MFCC.

mod fft;
mod mel;
mod mfcc;

pub use fft::{spectrum, Fft};
pub use mel::{
    build_mel_filterbank, hz_to_mel, log_mel_spectrogram, log_mel_spectrogram_with,
    mel_scale_convert, mel_to_hz, raw_log_mel, LogMelSpectrogram, MelDirection, MelFilterbank,
    NormalizationStats, LOG_FLOOR,
};
pub use mfcc::{dct_basis, inverse_dct, mfcc};

use crate::error::{Error, Result};

/// Sample rate every loader converts to.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

/// Hamming coefficients as used by the front end (not the textbook 0.54/0.46).
pub const HAMMING_ALPHA: f64 = 0.53836;
pub const HAMMING_BETA: f64 = 0.46164;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples in `[start, end)` as a new signal at the same rate.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.samples.len() {
            return Err(Error::invalid(format!(
                "slice [{start}, {end}) out of bounds for {} samples",
                self.samples.len()
            )));
        }
        Ok(Self {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    /// Linear-interpolation resampling. Output length is `round(len * to / from)`.
    pub fn resample(&self, to_rate: u32) -> Result<Self> {
        if to_rate == 0 {
            return Err(Error::invalid("target sample rate must be positive"));
        }
        if to_rate == self.sample_rate || self.samples.is_empty() {
            return Ok(Self {
                samples: self.samples.clone(),
                sample_rate: to_rate,
            });
        }
        let from = self.sample_rate as f64;
        let ratio = from / to_rate as f64;
        let out_len = ((self.samples.len() as f64) * to_rate as f64 / from).round() as usize;
        let last = self.samples.len() - 1;
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let i0 = (pos.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = pos - i0 as f64;
                self.samples[i0] * (1.0 - frac) + self.samples[i1] * frac
            })
            .collect();
        Ok(Self {
            samples,
            sample_rate: to_rate,
        })
    }
}

/// Front-end parameters. Defaults: 25 ms Hamming frames every 10 ms, 80 mel
/// channels between 50 Hz and 2.5 kHz, 512-point FFT, 13 MFCCs.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub preemphasis_alpha: f64,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub n_fft: usize,
    pub n_mfcc: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            preemphasis_alpha: 0.97,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 80,
            f_min_hz: 50.0,
            f_max_hz: 2500.0,
            n_fft: 512,
            n_mfcc: 13,
        }
    }
}

impl FrontendConfig {
    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(0.0..1.0).contains(&self.preemphasis_alpha) {
            return Err(Error::invalid(format!(
                "preemphasis alpha {} outside [0, 1)",
                self.preemphasis_alpha
            )));
        }
        if !(self.f_min_hz > 0.0 && self.f_min_hz < self.f_max_hz) {
            return Err(Error::invalid(format!(
                "need 0 < f_min ({}) < f_max ({})",
                self.f_min_hz, self.f_max_hz
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if self.f_max_hz > nyquist {
            return Err(Error::invalid(format!(
                "f_max {} Hz exceeds Nyquist {} Hz",
                self.f_max_hz, nyquist
            )));
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.win_ms) {
            return Err(Error::invalid("hop must be positive and no longer than the window"));
        }
        if self.n_mels == 0 {
            return Err(Error::invalid("n_mels must be positive"));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(Error::invalid(format!("n_fft {} is not a power of two", self.n_fft)));
        }
        let win = self.win_samples(sample_rate);
        if win < 2 || self.n_fft < win {
            return Err(Error::invalid(format!(
                "n_fft {} must cover the {win}-sample window",
                self.n_fft
            )));
        }
        if self.hop_samples(sample_rate) == 0 {
            return Err(Error::invalid("hop rounds to zero samples"));
        }
        Ok(())
    }
}

/// `y[0] = x[0]`, `y[n] = x[n] - alpha * x[n-1]`.
pub fn preemphasize(signal: &AudioSignal, alpha: f64) -> Result<AudioSignal> {
    if signal.is_empty() {
        return Err(Error::invalid("cannot preemphasize an empty signal"));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("preemphasis alpha {alpha} outside [0, 1)")));
    }
    let x = signal.samples();
    let mut y = Vec::with_capacity(x.len());
    y.push(x[0]);
    y.extend(x.windows(2).map(|w| w[1] - alpha * w[0]));
    Ok(AudioSignal {
        samples: y,
        sample_rate: signal.sample_rate,
    })
}

/// Symmetric Hamming window `w(n) = a - b cos(2 pi n / (N - 1))`.
pub fn hamming_window(n_points: usize) -> Result<Vec<f64>> {
    if n_points < 2 {
        return Err(Error::invalid(format!(
            "Hamming window needs at least 2 points, got {n_points}"
        )));
    }
    let denom = (n_points - 1) as f64;
    Ok((0..n_points)
        .map(|n| {
            HAMMING_ALPHA - HAMMING_BETA * (2.0 * std::f64::consts::PI * n as f64 / denom).cos()
        })
        .collect())
}

/// Number of full frames: `floor((len - win) / hop) + 1`, or 0 when `len < win`.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win || hop == 0 {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// Splits a signal into overlapping frames without padding. Frame `i` starts at `i * hop`.
pub fn frame_signal(signal: &AudioSignal, win_ms: f64, hop_ms: f64) -> Result<Vec<Vec<f64>>> {
    let sr = signal.sample_rate() as f64;
    let win = (win_ms * sr / 1000.0).round() as usize;
    let hop = (hop_ms * sr / 1000.0).round() as usize;
    frame_samples(signal.samples(), win, hop)
}

pub(crate) fn frame_samples(samples: &[f64], win: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if win == 0 || hop == 0 {
        return Err(Error::invalid("window and hop must be at least one sample"));
    }
    if samples.len() < win {
        return Err(Error::too_short(format!(
            "signal of {} samples is shorter than one {win}-sample window",
            samples.len()
        )));
    }
    let n = frame_count(samples.len(), win, hop);
    Ok((0..n)
        .map(|i| samples[i * hop..i * hop + win].to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn sig(x: &[f64]) -> AudioSignal {
        AudioSignal::new(x.to_vec(), 16_000).unwrap()
    }

    #[test]
    fn preemphasis_examples() {
        assert_eq!(preemphasize(&sig(&[1.0, 1.0, 1.0]), 0.0).unwrap().samples(), &[1.0, 1.0, 1.0]);
        let y = preemphasize(&sig(&[1.0, 1.0, 1.0]), 0.97).unwrap();
        assert_close(y.samples()[0], 1.0, 1e-15);
        assert_close(y.samples()[1], 0.03, 1e-12);
        assert_close(y.samples()[2], 0.03, 1e-12);
        let y = preemphasize(&sig(&[2.0, 0.0]), 0.97).unwrap();
        assert_eq!(y.samples(), &[2.0, -1.94]);
    }

    #[test]
    fn preemphasis_rejects_empty_and_bad_alpha() {
        assert!(matches!(preemphasize(&sig(&[]), 0.97), Err(Error::InvalidInput(_))));
        assert!(preemphasize(&sig(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn hamming_endpoints_and_symmetry() {
        for n in [2usize, 5, 400, 401] {
            let w = hamming_window(n).unwrap();
            assert_close(w[0], 0.07672, 1e-12);
            for i in 0..n {
                assert_close(w[i], w[n - 1 - i], 1e-12);
            }
            if n % 2 == 1 {
                assert_close(w[(n - 1) / 2], 1.0, 1e-12);
            }
        }
        assert!(hamming_window(1).is_err());
    }

    #[test]
    fn frame_counts() {
        let s = |n| sig(&vec![0.0; n]);
        assert_eq!(frame_signal(&s(400), 25.0, 10.0).unwrap().len(), 1);
        assert_eq!(frame_signal(&s(560), 25.0, 10.0).unwrap().len(), 2);
        assert_eq!(frame_signal(&s(160_000), 25.0, 10.0).unwrap().len(), 998);
        assert!(matches!(frame_signal(&s(399), 25.0, 10.0), Err(Error::TooShort(_))));
    }

    #[test]
    fn frames_start_at_hop_multiples() {
        let x: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let frames = frame_samples(&x, 400, 160).unwrap();
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f[0], (i * 160) as f64);
            assert_eq!(f.len(), 400);
        }
    }

    #[test]
    fn resample_doubles_length() {
        let s = AudioSignal::new(vec![0.0, 1.0, 0.0, -1.0], 8000).unwrap();
        let r = s.resample(16_000).unwrap();
        assert_eq!(r.len(), 8);
        assert_eq!(r.samples()[1], 0.5);
        assert_eq!(r.sample_rate(), 16_000);
    }

    #[test]
    fn config_validation() {
        let cfg = FrontendConfig::default();
        cfg.validate(16_000).unwrap();
        assert!(cfg.validate(4000).is_err());
        let bad = FrontendConfig { n_fft: 500, ..cfg.clone() };
        assert!(bad.validate(16_000).is_err());
        let bad = FrontendConfig { n_fft: 256, ..cfg };
        assert!(bad.validate(16_000).is_err());
    }

    #[test]
    fn rejects_non_finite_samples() {
        assert!(AudioSignal::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(AudioSignal::new(vec![0.0], 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn frame_count_formula(len in 1usize..5000, win in 1usize..600, hop in 1usize..300) {
            let x = vec![0.0; len];
            match frame_samples(&x, win, hop) {
                Ok(frames) => {
                    proptest::prop_assert!(len >= win);
                    proptest::prop_assert_eq!(frames.len(), (len - win) / hop + 1);
                    let last = frames.len() - 1;
                    proptest::prop_assert!(last * hop + win <= len);
                }
                Err(_) => proptest::prop_assert!(len < win),
            }
        }

        #[test]
        fn preemphasis_is_linear(
            x in proptest::collection::vec(-1.0f64..1.0, 1..64),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let y: Vec<f64> = x.iter().rev().copied().collect();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = preemphasize(&sig(&mix), 0.97).unwrap();
            let px = preemphasize(&sig(&x), 0.97).unwrap();
            let py = preemphasize(&sig(&y), 0.97).unwrap();
            for i in 0..x.len() {
                let rhs = a * px.samples()[i] + b * py.samples()[i];
                proptest::prop_assert!((lhs.samples()[i] - rhs).abs() < 1e-12);
            }
        }
    }
}
