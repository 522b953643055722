//! Focal loss, class-balanced sampling, the step-decay schedule and a small
//! SGD training loop.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{log_mel_spectrogram, AudioSignal, FrontendConfig, CANONICAL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::fusion::ProbabilityVector;
use crate::model::{ReneConfig, ReneNet};
use crate::nn::{softmax, Layer, ParameterSet};

/// Probabilities below this are clamped inside the logarithm.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 60,
            lr0: 1e-6,
            decay_factor: 0.1,
            decay_every: 2000,
            gamma: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::invalid(format!("decay_factor {} outside (0, 1)", self.decay_factor)));
        }
        if self.decay_every == 0 {
            return Err(Error::invalid("decay_every must be at least 1"));
        }
        check_gamma(self.gamma)?;
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::invalid(format!("lr0 {} must be positive", self.lr0)));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=5.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 5]")));
    }
    Ok(())
}

/// Feature matrices (`T x n_mels`) with class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    items: Vec<Array2<f64>>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(items: Vec<Array2<f64>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if items.len() != labels.len() {
            return Err(Error::invalid(format!("{} items but {} labels", items.len(), labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {l} outside [0, {n_classes})")));
        }
        Ok(Self { items, labels, n_classes })
    }

    /// Featurizes each clip with per-clip normalization.
    pub fn from_signals(clips: &[(AudioSignal, usize)], frontend: &FrontendConfig, n_classes: usize) -> Result<Self> {
        let items = clips
            .iter()
            .map(|(s, _)| log_mel_spectrogram(s, frontend).map(|m| m.frames))
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, clips.iter().map(|(_, l)| *l).collect(), n_classes)
    }

    pub fn items(&self) -> &[Array2<f64>] {
        &self.items
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn target_prob(probs: &[f64], target: usize) -> Result<f64> {
    probs
        .get(target)
        .copied()
        .ok_or_else(|| Error::invalid(format!("target {target} outside {} classes", probs.len())))
}

/// `-(1 - p_t)^gamma * ln(p_t)`.
pub fn focal_loss(probs: &ProbabilityVector, target: usize, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let pt = target_prob(probs.probs(), target)?;
    Ok(-(1.0 - pt).powf(gamma) * pt.max(LOG_PROB_FLOOR).ln())
}

pub fn cross_entropy(probs: &ProbabilityVector, target: usize) -> Result<f64> {
    focal_loss(probs, target, 0.0)
}

/// Focal loss of `softmax(logits)` and its gradient with respect to `logits`.
pub fn focal_loss_with_grad(logits: &Array1<f64>, target: usize, gamma: f64) -> Result<(f64, Array1<f64>)> {
    check_gamma(gamma)?;
    let p = softmax(&logits.clone().into_dyn(), 0)?;
    let p = p.as_slice().expect("contiguous");
    let pt = target_prob(p, target)?;
    let q = 1.0 - pt;
    let (log_p, dlog) = if pt < LOG_PROB_FLOOR {
        (LOG_PROB_FLOOR.ln(), 0.0)
    } else {
        (pt.ln(), 1.0 / pt)
    };
    let loss = -q.powf(gamma) * log_p;
    // dL/dp_t; the first term vanishes with q (and is absent for gamma = 0).
    let modulating = if gamma == 0.0 || q == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * log_p };
    let dl_dpt = modulating - q.powf(gamma) * dlog;
    let grad = Array1::from_iter(p.iter().enumerate().map(|(j, &pj)| {
        let delta = if j == target { 1.0 } else { 0.0 };
        dl_dpt * pt * (delta - pj)
    }));
    Ok((loss, grad))
}

/// Per-item weights proportional to the inverse frequency of the item's
/// class, summing to one.
pub fn weighted_sampler_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot build sampler weights for an empty dataset"));
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("label {l} outside [0, {n_classes})")))? += 1;
    }
    let raw: Vec<f64> = labels.iter().map(|&l| 1.0 / counts[l] as f64).collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / z).collect())
}

/// `lr0 * decay_factor ^ floor(step / decay_every)`.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    let k = (step / cfg.decay_every.max(1)) as i32;
    cfg.lr0 * cfg.decay_factor.powi(k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate at the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub trace: Vec<EpochStats>,
}

/// Mini-batch SGD with focal loss and class-balanced sampling with
/// replacement. An epoch is `ceil(len / batch_size)` batches.
pub fn train(net: &ReneNet, mut params: ParameterSet, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.n_classes() != net.config().n_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model has {}",
            data.n_classes(),
            net.config().n_classes
        )));
    }
    let weights = weighted_sampler_weights(data.labels(), data.n_classes())?;
    let sampler = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches = data.len().div_ceil(cfg.batch_size);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut lr = lr_at_step(step, cfg);
        for _ in 0..batches {
            lr = lr_at_step(step, cfg);
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch_size {
                let i = sampler.sample(&mut rng);
                let (logits, cache) = net.forward(&params, &data.items()[i])?;
                let (loss, dlogits) = focal_loss_with_grad(&logits, data.labels()[i], cfg.gamma)?;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { step, loss });
                }
                batch_loss += loss;
                net.backward(&params, &cache, &dlogits, &mut grads)?;
            }
            let n = cfg.batch_size as f64;
            if let Some(name) = grads.all_finite() {
                return Err(Error::NonFiniteGradient(format!("{name} at step {step}")));
            }
            params.add_scaled(&grads, -lr / n)?;
            epoch_loss += batch_loss / n;
            step += 1;
        }
        trace.push(EpochStats {
            epoch,
            mean_loss: epoch_loss / batches as f64,
            lr,
        });
    }
    Ok(TrainOutcome { params, trace })
}

/// Initializes a network from `model_cfg` with the training seed and trains it.
pub fn train_toy(data: &LabeledDataset, model_cfg: &ReneConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let net = ReneNet::new(model_cfg)?;
    let params = net.init_params(cfg.seed)?;
    train(&net, params, data, cfg)
}

/// Fraction of items whose argmax prediction equals the label.
pub fn accuracy(net: &ReneNet, params: &ParameterSet, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let mut hits = 0;
    for (x, &y) in data.items().iter().zip(data.labels()) {
        let logits = net.infer(params, x)?;
        if crate::fusion::argmax(logits.as_slice().expect("contiguous")) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

pub fn write_loss_trace(trace: &[EpochStats], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "mean_loss", "lr"])?;
    for e in trace {
        w.write_record([e.epoch.to_string(), e.mean_loss.to_string(), e.lr.to_string()])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Two-class synthetic set at 16 kHz: label 0 is a pure tone (random
/// frequency in 300..1500 Hz) with faint noise, label 1 is white noise.
/// Classes alternate.
pub fn synthetic_tone_noise(n_clips: usize, seconds: f64, seed: u64) -> Result<Vec<(AudioSignal, usize)>> {
    let sr = CANONICAL_SAMPLE_RATE;
    let n = (seconds * sr as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_clips)
        .map(|i| {
            let label = i % 2;
            let samples = if label == 0 {
                let f = rng.gen_range(300.0..1500.0);
                let phase = rng.gen_range(0.0..2.0 * PI);
                (0..n)
                    .map(|t| 0.5 * (2.0 * PI * f * t as f64 / sr as f64 + phase).sin() + rng.gen_range(-0.01..0.01))
                    .collect()
            } else {
                (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
            };
            Ok((AudioSignal::new(samples, sr)?, label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset_config;
    use proptest::prelude::*;

    fn two(p: f64) -> ProbabilityVector {
        ProbabilityVector::unlabeled(vec![p, 1.0 - p]).unwrap()
    }

    #[test]
    fn gamma_zero_is_cross_entropy() {
        for p in [0.1, 0.5, 0.9] {
            assert_eq!(focal_loss(&two(p), 0, 0.0).unwrap(), -p.ln());
        }
    }

    #[test]
    fn focal_factor_at_point_nine() {
        let p = two(0.9);
        let ratio = focal_loss(&p, 0, 2.0).unwrap() / cross_entropy(&p, 0).unwrap();
        assert!((ratio - 0.01).abs() < 1e-12, "{ratio}");
    }

    #[test]
    fn invalid_targets_and_gammas() {
        assert!(focal_loss(&two(0.5), 2, 2.0).is_err());
        assert!(focal_loss(&two(0.5), 0, 5.5).is_err());
        assert!(focal_loss(&two(0.5), 0, -1.0).is_err());
    }

    #[test]
    fn floor_keeps_loss_finite() {
        let p = ProbabilityVector::unlabeled(vec![0.0, 1.0]).unwrap();
        let l = focal_loss(&p, 0, 2.0).unwrap();
        assert!((l - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let z = Array1::from(vec![0.3, -1.2, 2.0]);
        for gamma in [0.0, 0.5, 2.0, 5.0] {
            for target in 0..3 {
                let (_, g) = focal_loss_with_grad(&z, target, gamma).unwrap();
                for j in 0..3 {
                    let h = 1e-6;
                    let mut zp = z.clone();
                    zp[j] += h;
                    let mut zm = z.clone();
                    zm[j] -= h;
                    let num = (focal_loss_with_grad(&zp, target, gamma).unwrap().0 - focal_loss_with_grad(&zm, target, gamma).unwrap().0) / (2.0 * h);
                    assert!((num - g[j]).abs() < 1e-7, "gamma {gamma} target {target} j {j}: {num} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn sampler_weights_balance_classes() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let w = weighted_sampler_weights(&labels, 2).unwrap();
        let a: f64 = w[..90].iter().sum();
        let b: f64 = w[90..].iter().sum();
        assert!((a - 0.5).abs() < 1e-12 && (b - 0.5).abs() < 1e-12);
        let single = weighted_sampler_weights(&[0, 0, 0, 0], 1).unwrap();
        assert!(single.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(weighted_sampler_weights(&[], 2).is_err());
    }

    #[test]
    fn sampled_batches_are_balanced() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let w = weighted_sampler_weights(&labels, 2).unwrap();
        let dist = WeightedIndex::new(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut minority = 0;
        for _ in 0..draws {
            let i = dist.sample(&mut rng);
            assert!(i < labels.len());
            minority += labels[i];
        }
        let frac = minority as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.03, "{frac}");
    }

    #[test]
    fn schedule_steps_down() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_step(0, &cfg), 1e-6);
        assert_eq!(lr_at_step(1999, &cfg), 1e-6);
        assert!((lr_at_step(2000, &cfg) - 1e-7).abs() < 1e-21);
        assert!((lr_at_step(4000, &cfg) - 1e-8).abs() < 1e-22);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { decay_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { gamma: 6.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn dataset_checks_labels() {
        assert!(LabeledDataset::new(vec![Array2::zeros((2, 2))], vec![3], 2).is_err());
        assert!(LabeledDataset::new(vec![], vec![0], 2).is_err());
        let d = LabeledDataset::new(vec![Array2::zeros((2, 2)); 3], vec![0, 1, 1], 2).unwrap();
        assert_eq!(d.class_counts(), vec![1, 2]);
    }

    #[test]
    fn diverging_runs_report_the_step() {
        let mut cfg = preset_config("toy").unwrap();
        cfg.whisper_dim = 16;
        cfg.conformer_dim = 8;
        cfg.bigru_hidden = 32;
        cfg.trial_channels = 2;
        let net = ReneNet::new(&cfg).unwrap();
        let mut params = net.init_params(0).unwrap();
        params.get_mut("trial.head.bias").unwrap()[0] = f64::NAN;
        let data = LabeledDataset::new(vec![Array2::zeros((24, 80)); 2], vec![0, 1], 2).unwrap();
        let tc = TrainConfig { epochs: 1, batch_size: 1, lr0: 0.1, ..Default::default() };
        assert!(matches!(
            train(&net, params, &data, &tc),
            Err(Error::TrainingDiverged { step: 0, .. } | Error::InvalidInput(_))
        ));
    }

    #[test]
    fn loss_trace_csv() {
        let trace = [EpochStats { epoch: 0, mean_loss: 0.5, lr: 0.01 }];
        let mut buf = Vec::new();
        write_loss_trace(&trace, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,mean_loss,lr\n0,0.5,0.01\n");
    }

    proptest! {
        #[test]
        fn focal_is_at_most_cross_entropy(p in 1e-6f64..(1.0 - 1e-6), gamma in 0.0f64..=5.0) {
            let v = two(p);
            prop_assert!(focal_loss(&v, 0, gamma).unwrap() <= cross_entropy(&v, 0).unwrap() + 1e-15);
        }

        #[test]
        fn focal_decreases_in_target_probability(a in 1e-6f64..0.999, d in 1e-6f64..1e-3, gamma in 0.0f64..=5.0) {
            let b = (a + d).min(1.0 - 1e-9);
            prop_assert!(focal_loss(&two(b), 0, gamma).unwrap() <= focal_loss(&two(a), 0, gamma).unwrap());
        }

        #[test]
        fn schedule_is_non_increasing(s in 0usize..100_000, d in 0usize..10_000) {
            let cfg = TrainConfig::default();
            prop_assert!(lr_at_step(s + d, &cfg) <= lr_at_step(s, &cfg));
        }
    }
}
