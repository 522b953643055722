use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::conformer::{ConformerEncoder, ConformerEncoderCache};
use super::encoder::{EncoderCache, WhisperEncoder};
use super::trial::{TrialBlock, TrialCache};
use super::ReneConfig;
use crate::audio::{log_mel_spectrogram_with, AudioSignal, FrontendConfig, LogMelSpectrogram, NormalizationStats};
use crate::error::{Error, Result};
use crate::fusion::ProbabilityVector;
use crate::nn::{BiGru, Layer, ParamSpec, ParameterSet};

/// Most-square factorization `rows x cols` of `n` with `rows >= cols`.
pub fn map_geometry(n: usize) -> (usize, usize) {
    let mut cols = (n as f64).sqrt() as usize;
    while cols > 1 && !n.is_multiple_of(cols) {
        cols -= 1;
    }
    let cols = cols.max(1);
    (n / cols, cols)
}

/// Reshapes the decoder's final state into a one-channel 2D map.
pub fn bigru_decode(final_state: &Array1<f64>) -> Array3<f64> {
    let (r, c) = map_geometry(final_state.len());
    final_state
        .to_owned()
        .into_shape_with_order((1, r, c))
        .expect("factorization covers the vector")
}

/// The full network from a `T x n_mels` log-mel matrix to class logits.
#[derive(Debug, Clone)]
pub struct ReneNet {
    cfg: ReneConfig,
    encoder: WhisperEncoder,
    conformer: ConformerEncoder,
    decoder: BiGru,
    trial: TrialBlock,
}

pub struct ReneCache {
    encoder: EncoderCache,
    conformer: ConformerEncoderCache,
    decoder: <BiGru as Layer>::Cache,
    trial: TrialCache,
    steps: usize,
    /// Final decoder state, `2 * bigru_hidden` long.
    pub embedding: Array1<f64>,
}

impl ReneCache {
    pub fn conformer(&self) -> &ConformerEncoderCache {
        &self.conformer
    }

    pub fn trial(&self) -> &TrialCache {
        &self.trial
    }
}

impl ReneNet {
    pub fn new(cfg: &ReneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: WhisperEncoder::new(cfg)?,
            conformer: ConformerEncoder::new(cfg)?,
            decoder: BiGru::new("decoder.bigru", cfg.conformer_dim, cfg.bigru_hidden),
            trial: TrialBlock::new(cfg),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ReneConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        ParameterSet::init(&self.param_specs(), seed)
    }

    /// Checks that `params` holds every tensor this network reads, with the right shape.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        for spec in self.param_specs() {
            let t = params
                .get(&spec.name)
                .map_err(|_| Error::invalid(format!("parameter {} is missing", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn encoder(&self) -> &WhisperEncoder {
        &self.encoder
    }

    pub fn conformer(&self) -> &ConformerEncoder {
        &self.conformer
    }

    pub fn trial(&self) -> &TrialBlock {
        &self.trial
    }
}

impl Layer for ReneNet {
    type Input = Array2<f64>;
    type Output = Array1<f64>;
    type Cache = ReneCache;

    fn forward(&self, p: &ParameterSet, x: &Array2<f64>) -> Result<(Array1<f64>, ReneCache)> {
        if x.ncols() != self.cfg.n_mels {
            return Err(Error::invalid(format!(
                "expected {} mel channels, got {}",
                self.cfg.n_mels,
                x.ncols()
            )));
        }
        let (h, encoder) = self.encoder.forward(p, x)?;
        let (h, conformer) = self.conformer.forward(p, &h)?;
        let ((_, state), decoder) = self.decoder.forward(p, &h)?;
        let (logits, trial) = self.trial.forward(p, &bigru_decode(&state))?;
        Ok((
            logits,
            ReneCache {
                encoder,
                conformer,
                decoder,
                trial,
                steps: h.nrows(),
                embedding: state,
            },
        ))
    }

    fn backward(&self, p: &ParameterSet, c: &ReneCache, dy: &Array1<f64>, g: &mut ParameterSet) -> Result<Array2<f64>> {
        let d_map = self.trial.backward(p, &c.trial, dy, g)?;
        let d_state = Array1::from_iter(d_map.iter().copied());
        let d_seq = Array2::zeros((c.steps, self.cfg.decoder_dim()));
        let d = self.decoder.backward(p, &c.decoder, &(d_seq, d_state), g)?;
        let d = self.conformer.backward(p, &c.conformer, &d, g)?;
        self.encoder.backward(p, &c.encoder, &d, g)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.encoder.param_specs();
        s.extend(self.conformer.param_specs());
        s.extend(self.decoder.param_specs());
        s.extend(self.trial.param_specs());
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReneOutput {
    pub probs: ProbabilityVector,
    pub logits: Array1<f64>,
    pub embedding: Array1<f64>,
}

/// Runs the front end (per-clip normalization) and the network on one clip.
pub fn rene_forward(signal: &AudioSignal, params: &ParameterSet, cfg: &ReneConfig) -> Result<ReneOutput> {
    let frontend = FrontendConfig {
        n_mels: cfg.n_mels,
        ..FrontendConfig::default()
    };
    let spec = log_mel_spectrogram_with(signal, &frontend, None)?;
    let net = ReneNet::new(cfg)?;
    predict_frames(&net, params, &spec.frames)
}

fn predict_frames(net: &ReneNet, params: &ParameterSet, frames: &Array2<f64>) -> Result<ReneOutput> {
    let (logits, cache) = net.forward(params, frames)?;
    let probs = ProbabilityVector::from_logits(logits.as_slice().expect("contiguous"), net.cfg.class_names())?;
    Ok(ReneOutput {
        probs,
        logits,
        embedding: cache.embedding,
    })
}

#[derive(Serialize, Deserialize)]
struct NormFile {
    mean: f64,
    max_abs: f64,
}

const CONFIG_FILE: &str = "model.cfg";
const PARAMS_FILE: &str = "params.bin";
const NORM_FILE: &str = "norm.json";

/// Network, weights and front-end settings bundled for inference.
#[derive(Debug, Clone)]
pub struct ReneModel {
    pub frontend: FrontendConfig,
    /// Corpus statistics; `None` means per-clip min-max normalization.
    pub norm: Option<NormalizationStats>,
    pub params: ParameterSet,
    net: ReneNet,
}

impl ReneModel {
    pub fn new(cfg: &ReneConfig, seed: u64) -> Result<Self> {
        let net = ReneNet::new(cfg)?;
        let params = net.init_params(seed)?;
        Self::from_parts(net, params)
    }

    pub fn from_parts(net: ReneNet, params: ParameterSet) -> Result<Self> {
        net.check_params(&params)?;
        Ok(Self {
            frontend: FrontendConfig {
                n_mels: net.cfg.n_mels,
                ..FrontendConfig::default()
            },
            norm: None,
            params,
            net,
        })
    }

    pub fn config(&self) -> &ReneConfig {
        &self.net.cfg
    }

    pub fn net(&self) -> &ReneNet {
        &self.net
    }

    pub fn featurize(&self, signal: &AudioSignal) -> Result<LogMelSpectrogram> {
        log_mel_spectrogram_with(signal, &self.frontend, self.norm.as_ref())
    }

    pub fn predict(&self, signal: &AudioSignal) -> Result<ReneOutput> {
        self.predict_frames(&self.featurize(signal)?.frames)
    }

    pub fn predict_frames(&self, frames: &Array2<f64>) -> Result<ReneOutput> {
        predict_frames(&self.net, &self.params, frames)
    }

    /// Writes `model.cfg`, `params.bin` and, with corpus statistics, `norm.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.net.cfg.save(&dir.join(CONFIG_FILE))?;
        self.params.save(&dir.join(PARAMS_FILE))?;
        let norm_path = dir.join(NORM_FILE);
        match &self.norm {
            Some(n) => {
                let text = serde_json::to_string_pretty(&NormFile {
                    mean: n.mean,
                    max_abs: n.max_abs,
                })?;
                std::fs::write(&norm_path, text).map_err(|e| Error::io(&norm_path, e))?;
            }
            None if norm_path.exists() => {
                std::fs::remove_file(&norm_path).map_err(|e| Error::io(&norm_path, e))?;
            }
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = ReneConfig::load(&dir.join(CONFIG_FILE))?;
        let params = ParameterSet::load(&dir.join(PARAMS_FILE))?;
        let mut model = Self::from_parts(ReneNet::new(&cfg)?, params)?;
        let norm_path = dir.join(NORM_FILE);
        if norm_path.exists() {
            let text = std::fs::read_to_string(&norm_path).map_err(|e| Error::io(&norm_path, e))?;
            let n: NormFile = serde_json::from_str(&text)?;
            model.norm = Some(NormalizationStats {
                mean: n.mean,
                max_abs: n.max_abs,
            });
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::frame_count;
    use crate::model::preset_config;
    use crate::nn::{grad_check, probe_loss, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frames(t: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((t, 80), || rng.gen_range(-1.0..1.0))
    }

    fn tiny() -> ReneConfig {
        let mut c = preset_config("toy").unwrap().with_classes(3);
        c.whisper_dim = 16;
        c.whisper_layers = 1;
        c.conformer_dim = 8;
        c.conformer_layers = 1;
        c.bigru_hidden = 32;
        c.trial_channels = 2;
        c.ff_mult = 2;
        c.conv_kernel = 3;
        c
    }

    #[test]
    fn map_geometry_is_most_square() {
        assert_eq!(map_geometry(1024), (32, 32));
        assert_eq!(map_geometry(128), (16, 8));
        assert_eq!(map_geometry(12), (4, 3));
        assert_eq!(map_geometry(7), (7, 1));
    }

    #[test]
    fn toy_parameter_budget() {
        let n = ReneNet::new(&preset_config("toy").unwrap()).unwrap().param_count();
        assert!(n < 2_000_000, "{n}");
    }

    #[test]
    fn presets_pass_the_shape_audit_symbolically() {
        for name in ["toy", "rene_s", "rene_l"] {
            let cfg = preset_config(name).unwrap();
            for secs in [1usize, 4, 10] {
                let t = frame_count(secs * 16000, 400, 160);
                let s = cfg.stage_shapes(t).unwrap();
                assert_eq!(s.encoder.0, t.div_ceil(2));
                assert_eq!(s.conformer.0, ConformerEncoder::out_len(s.encoder.0));
                assert_eq!(s.feature_map.0 * s.feature_map.1, 2 * cfg.bigru_hidden);
            }
        }
    }

    #[test]
    fn toy_forward_matches_the_shape_plan() {
        let cfg = preset_config("toy").unwrap();
        let net = ReneNet::new(&cfg).unwrap();
        let p = net.init_params(1).unwrap();
        let x = frames(98, 2);
        let plan = cfg.stage_shapes(98).unwrap();
        let enc = net.encoder().infer(&p, &x).unwrap();
        assert_eq!(enc.dim(), plan.encoder);
        let conf = net.conformer().infer(&p, &enc).unwrap();
        assert_eq!(conf.dim(), plan.conformer);
        let (logits, cache) = net.forward(&p, &x).unwrap();
        assert_eq!(logits.len(), plan.logits);
        assert_eq!(cache.embedding.len(), plan.decoder_state);
        assert_eq!(cache.conformer().blocks.len(), cfg.conformer_layers);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let net = ReneNet::new(&tiny()).unwrap();
        let p = net.init_params(0).unwrap();
        let x = Array2::zeros((20, 40));
        assert!(matches!(net.forward(&p, &x), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn output_is_a_distribution_and_deterministic() {
        let model = ReneModel::new(&tiny(), 3).unwrap();
        let x = frames(30, 4);
        let a = model.predict_frames(&x).unwrap();
        let b = model.predict_frames(&x).unwrap();
        assert_eq!(a, b);
        assert!((a.probs.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(a.probs.probs().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn permuting_head_columns_permutes_probabilities() {
        let mut model = ReneModel::new(&tiny(), 5).unwrap();
        let x = frames(30, 6);
        let base = model.predict_frames(&x).unwrap();
        let perm = [2usize, 0, 1];
        let w = model.params.view2("trial.head.weight").unwrap().to_owned();
        let b = model.params.view1("trial.head.bias").unwrap().to_owned();
        let mut w2 = w.clone();
        let mut b2 = b.clone();
        for (new, &old) in perm.iter().enumerate() {
            w2.column_mut(new).assign(&w.column(old));
            b2[new] = b[old];
        }
        model.params.insert("trial.head.weight", w2.into_dyn());
        model.params.insert("trial.head.bias", b2.into_dyn());
        let permuted = model.predict_frames(&x).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert!((permuted.probs.probs()[new] - base.probs.probs()[old]).abs() < 1e-12);
        }
        assert_eq!(perm[permuted.probs.argmax()], base.probs.argmax());
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = ReneModel::new(&tiny(), 8).unwrap();
        model.norm = Some(NormalizationStats { mean: -3.0, max_abs: 2.5 });
        model.save(dir.path()).unwrap();
        let back = ReneModel::load(dir.path()).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config(), model.config());
        assert_eq!(back.norm, model.norm);
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let net = ReneNet::new(&tiny()).unwrap();
        let mut p = net.init_params(0).unwrap();
        p.insert("trial.head.bias", ndarray::ArrayD::zeros(ndarray::IxDyn(&[5])));
        assert!(ReneModel::from_parts(net, p).is_err());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let net = ReneNet::new(&tiny()).unwrap();
        let p = net.init_params(9).unwrap();
        let opts = GradCheckOptions {
            sample_fraction: 0.05,
            seed: 3,
            ..GradCheckOptions::default()
        };
        let r = grad_check(&net, &p, &frames(24, 10), probe_loss(11), &opts).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
