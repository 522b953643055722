//! Mel scale, triangular filterbank and the log-mel spectrogram pipeline.

use ndarray::Array2;

use super::{frame_samples, hamming_window, preemphasize, AudioSignal, Fft, FrontendConfig};
use crate::error::{Error, Result};

/// Added to filterbank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MelDirection {
    HzToMel,
    MelToHz,
}

/// Checked conversion; negative inputs are rejected.
pub fn mel_scale_convert(value: f64, direction: MelDirection) -> Result<f64> {
    if value.is_nan() || value < 0.0 {
        return Err(Error::invalid(format!("mel conversion of negative value {value}")));
    }
    Ok(match direction {
        MelDirection::HzToMel => hz_to_mel(value),
        MelDirection::MelToHz => mel_to_hz(value),
    })
}

/// `n_mels x (n_fft/2 + 1)` triangular filters, centers equally spaced in mel.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub weights: Array2<f64>,
    pub center_freqs_hz: Vec<f64>,
    /// Lower and upper triangle edges per filter.
    pub band_edges_hz: Vec<(f64, f64)>,
    pub bin_freqs_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.ncols()
    }
}

// Integral of the unit triangle (lo, c, hi) over [a, b].
fn triangle_integral(a: f64, b: f64, lo: f64, c: f64, hi: f64) -> f64 {
    let mut total = 0.0;
    let (u, v) = (a.max(lo), b.min(c));
    if v > u {
        total += ((v - lo).powi(2) - (u - lo).powi(2)) / (2.0 * (c - lo));
    }
    let (u, v) = (a.max(c), b.min(hi));
    if v > u {
        total += ((hi - u).powi(2) - (hi - v).powi(2)) / (2.0 * (hi - c));
    }
    total
}

/// Builds the filterbank. Each weight is the triangle's mean value over the
/// FFT bin's frequency interval, so narrow low-frequency triangles that fall
/// between bin centers still receive energy. Bins whose center lies outside
/// `[f_min, f_max]` get zero weight.
pub fn build_mel_filterbank(config: &FrontendConfig, sample_rate: u32) -> Result<MelFilterbank> {
    config.validate(sample_rate)?;
    let n_bins = config.n_fft / 2 + 1;
    let bin_width = sample_rate as f64 / config.n_fft as f64;
    let bin_freqs_hz: Vec<f64> = (0..n_bins).map(|k| k as f64 * bin_width).collect();

    let mel_lo = hz_to_mel(config.f_min_hz);
    let mel_hi = hz_to_mel(config.f_max_hz);
    let step = (mel_hi - mel_lo) / (config.n_mels + 1) as f64;
    let points: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();
    // Pin the outer edges so float round trips cannot leak past the cutoffs.
    let mut points = points;
    points[0] = config.f_min_hz;
    *points.last_mut().expect("at least two points") = config.f_max_hz;

    let mut weights = Array2::zeros((config.n_mels, n_bins));
    let mut center_freqs_hz = Vec::with_capacity(config.n_mels);
    let mut band_edges_hz = Vec::with_capacity(config.n_mels);
    for m in 0..config.n_mels {
        let (lo, c, hi) = (points[m], points[m + 1], points[m + 2]);
        center_freqs_hz.push(c);
        band_edges_hz.push((lo, hi));
        for (k, &f) in bin_freqs_hz.iter().enumerate() {
            if f < config.f_min_hz || f > config.f_max_hz {
                continue;
            }
            let w = triangle_integral(f - bin_width / 2.0, f + bin_width / 2.0, lo, c, hi)
                / bin_width;
            weights[[m, k]] = w;
        }
        if weights.row(m).iter().all(|&w| w <= 0.0) {
            return Err(Error::invalid(format!(
                "mel filter {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; increase n_fft"
            )));
        }
    }
    Ok(MelFilterbank {
        weights,
        center_freqs_hz,
        band_edges_hz,
        bin_freqs_hz,
    })
}

/// `T x n_mels` log-mel energies plus the start time of every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub frames: Array2<f64>,
    pub frame_times: Vec<f64>,
}

impl LogMelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

/// Corpus-level normalization: subtract `mean`, divide by `max_abs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub mean: f64,
    pub max_abs: f64,
}

impl NormalizationStats {
    /// Statistics over a set of unnormalized log-mel matrices (see [`raw_log_mel`]).
    pub fn from_corpus<'a>(specs: impl IntoIterator<Item = &'a LogMelSpectrogram>) -> Result<Self> {
        let specs: Vec<_> = specs.into_iter().collect();
        let count: usize = specs.iter().map(|s| s.frames.len()).sum();
        if count == 0 {
            return Err(Error::invalid("normalization statistics need at least one frame"));
        }
        let mean = specs.iter().flat_map(|s| s.frames.iter()).sum::<f64>() / count as f64;
        let max_abs = specs
            .iter()
            .flat_map(|s| s.frames.iter())
            .fold(0.0f64, |m, &v| m.max((v - mean).abs()));
        Ok(Self {
            mean,
            max_abs: if max_abs > 0.0 { max_abs } else { 1.0 },
        })
    }
}

/// Preemphasis, framing, Hamming window, power spectrum, mel filterbank and
/// `log10(energy + LOG_FLOOR)`. No normalization.
pub fn raw_log_mel(signal: &AudioSignal, config: &FrontendConfig) -> Result<LogMelSpectrogram> {
    let sr = signal.sample_rate();
    let win = config.win_samples(sr);
    let hop = config.hop_samples(sr);
    if signal.len() < win {
        return Err(Error::too_short(format!(
            "signal of {} samples is shorter than one {win}-sample window",
            signal.len()
        )));
    }
    let bank = build_mel_filterbank(config, sr)?;
    let emphasized = preemphasize(signal, config.preemphasis_alpha)?;
    let frames = frame_samples(emphasized.samples(), win, hop)?;
    let window = hamming_window(win)?;
    let fft = Fft::new(config.n_fft)?;
    let n_bins = bank.n_bins();

    let mut out = Array2::zeros((frames.len(), config.n_mels));
    let mut power = vec![0.0; n_bins];
    let mut windowed = vec![0.0; win];
    for (t, frame) in frames.iter().enumerate() {
        for ((w, &x), &h) in windowed.iter_mut().zip(frame).zip(&window) {
            *w = x * h;
        }
        let spec = fft.real(&windowed)?;
        for (p, c) in power.iter_mut().zip(&spec[..n_bins]) {
            *p = c.norm_sqr();
        }
        for m in 0..config.n_mels {
            let energy: f64 = bank
                .weights
                .row(m)
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            out[[t, m]] = (energy + LOG_FLOOR).log10();
        }
    }
    let frame_times = (0..frames.len())
        .map(|i| (i * hop) as f64 / sr as f64)
        .collect();
    Ok(LogMelSpectrogram {
        frames: out,
        frame_times,
    })
}

/// Log-mel spectrogram scaled into `[-1, 1]` with per-clip min-max scaling.
/// A constant clip (for example silence) maps to a uniform `-1`.
pub fn log_mel_spectrogram(signal: &AudioSignal, config: &FrontendConfig) -> Result<LogMelSpectrogram> {
    log_mel_spectrogram_with(signal, config, None)
}

/// As [`log_mel_spectrogram`], but with corpus statistics when given:
/// `(x - mean) / max_abs`, clamped to `[-1, 1]`.
pub fn log_mel_spectrogram_with(
    signal: &AudioSignal,
    config: &FrontendConfig,
    stats: Option<&NormalizationStats>,
) -> Result<LogMelSpectrogram> {
    let mut spec = raw_log_mel(signal, config)?;
    match stats {
        Some(s) => spec
            .frames
            .mapv_inplace(|v| ((v - s.mean) / s.max_abs).clamp(-1.0, 1.0)),
        None => {
            let lo = spec.frames.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = spec.frames.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            if range > 0.0 {
                spec.frames
                    .mapv_inplace(|v| (2.0 * (v - lo) / range - 1.0).clamp(-1.0, 1.0));
            } else {
                spec.frames.fill(-1.0);
            }
        }
    }
    Ok(spec)
}
