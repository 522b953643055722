use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::AttentionConfig;

/// Kernel sizes of the trial block's three branches. The center branch is the
/// identity path and is always `[1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialKernels {
    pub left: Vec<usize>,
    pub center: Vec<usize>,
    pub right: Vec<usize>,
}

impl Default for TrialKernels {
    fn default() -> Self {
        Self {
            left: vec![7, 5, 3],
            center: vec![1],
            right: vec![3, 5, 7],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReneConfig {
    pub whisper_layers: usize,
    pub whisper_dim: usize,
    pub whisper_heads: usize,
    pub conformer_layers: usize,
    pub conformer_dim: usize,
    pub conformer_heads: usize,
    /// Hidden size per direction; the decoder state is twice this.
    pub bigru_hidden: usize,
    pub n_classes: usize,
    pub trial_kernel_sizes: TrialKernels,
    pub trial_channels: usize,
    pub conv_kernel: usize,
    pub ff_mult: usize,
    pub n_mels: usize,
    /// Optional class names; empty means `class_0..class_{n-1}`.
    pub class_names: Vec<String>,
}

/// Named presets: `rene_s`, `rene_l` and the desk-scale `toy`.
pub fn preset_config(name: &str) -> Result<ReneConfig> {
    let base = |wl, wd, wh, cl, cd, ch, h, tc| ReneConfig {
        whisper_layers: wl,
        whisper_dim: wd,
        whisper_heads: wh,
        conformer_layers: cl,
        conformer_dim: cd,
        conformer_heads: ch,
        bigru_hidden: h,
        n_classes: 2,
        trial_kernel_sizes: TrialKernels::default(),
        trial_channels: tc,
        conv_kernel: 15,
        ff_mult: 4,
        n_mels: 80,
        class_names: Vec::new(),
    };
    match name {
        "rene_s" => Ok(base(4, 384, 6, 16, 256, 4, 512, 32)),
        "rene_l" => Ok(base(32, 1280, 20, 17, 512, 8, 512, 64)),
        "toy" => Ok(base(2, 64, 2, 2, 64, 2, 64, 8)),
        other => Err(Error::invalid(format!(
            "unknown preset {other:?} (expected rene_s, rene_l or toy)"
        ))),
    }
}

/// Per-stage shapes for an input of `n_frames` log-mel frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShapes {
    pub input: (usize, usize),
    pub encoder: (usize, usize),
    pub subsampled: (usize, usize),
    pub conformer: (usize, usize),
    pub decoder_state: usize,
    pub feature_map: (usize, usize),
    pub logits: usize,
}

fn strictly_monotone(k: &[usize], increasing: bool) -> bool {
    k.windows(2)
        .all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] })
}

impl ReneConfig {
    pub fn with_classes(mut self, n_classes: usize) -> Self {
        self.n_classes = n_classes;
        self.class_names.clear();
        self
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.class_names.len() == self.n_classes {
            self.class_names.clone()
        } else {
            (0..self.n_classes).map(|i| format!("class_{i}")).collect()
        }
    }

    pub fn whisper_attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.whisper_dim, self.whisper_heads)
    }

    pub fn conformer_attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.conformer_dim, self.conformer_heads)
    }

    pub fn validate(&self) -> Result<()> {
        self.whisper_attention()?;
        self.conformer_attention()?;
        if !self.whisper_dim.is_multiple_of(2) {
            return Err(Error::invalid("whisper_dim must be even for positional embeddings"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.n_classes {
            return Err(Error::invalid(format!(
                "{} class names given for {} classes",
                self.class_names.len(),
                self.n_classes
            )));
        }
        if self.bigru_hidden == 0 || self.trial_channels == 0 || self.n_mels == 0 || self.ff_mult == 0 {
            return Err(Error::invalid("sizes must be positive"));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::invalid("conformer depthwise kernel must be odd"));
        }
        let t = &self.trial_kernel_sizes;
        if t.left.is_empty() || t.right.is_empty() {
            return Err(Error::invalid("trial branches need at least one kernel"));
        }
        if t.center != [1] {
            return Err(Error::invalid("the trial block's center branch is the identity path [1]"));
        }
        if !strictly_monotone(&t.left, false) || !strictly_monotone(&t.right, true) {
            return Err(Error::invalid(
                "trial kernels must shrink along the left branch and grow along the right",
            ));
        }
        if t.left.iter().chain(&t.right).any(|k| k % 2 == 0) {
            return Err(Error::invalid("trial kernels must be odd"));
        }
        Ok(())
    }

    pub fn decoder_dim(&self) -> usize {
        2 * self.bigru_hidden
    }

    pub fn largest_trial_kernel(&self) -> usize {
        let t = &self.trial_kernel_sizes;
        t.left.iter().chain(&t.right).copied().max().unwrap_or(1)
    }

    pub fn stage_shapes(&self, n_frames: usize) -> Result<StageShapes> {
        self.validate()?;
        if n_frames == 0 {
            return Err(Error::too_short("no input frames"));
        }
        let half = |n: usize| n.div_ceil(2);
        let enc = half(n_frames);
        if enc < 4 {
            return Err(Error::too_short(format!(
                "conformer subsampling needs at least 4 steps, encoder produced {enc}"
            )));
        }
        let sub = half(half(enc));
        let map = super::map_geometry(self.decoder_dim());
        if map.0.min(map.1) < self.largest_trial_kernel() {
            return Err(Error::too_short(format!(
                "feature map {}x{} is smaller than the largest trial kernel {}",
                map.0,
                map.1,
                self.largest_trial_kernel()
            )));
        }
        Ok(StageShapes {
            input: (n_frames, self.n_mels),
            encoder: (enc, self.whisper_dim),
            subsampled: (sub, self.conformer_dim),
            conformer: (sub, self.conformer_dim),
            decoder_state: self.decoder_dim(),
            feature_map: map,
            logits: self.n_classes,
        })
    }

    /// Flat `key = value` text, one field per line.
    pub fn to_config_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "whisper_layers = {}", self.whisper_layers);
        let _ = writeln!(s, "whisper_dim = {}", self.whisper_dim);
        let _ = writeln!(s, "whisper_heads = {}", self.whisper_heads);
        let _ = writeln!(s, "conformer_layers = {}", self.conformer_layers);
        let _ = writeln!(s, "conformer_dim = {}", self.conformer_dim);
        let _ = writeln!(s, "conformer_heads = {}", self.conformer_heads);
        let _ = writeln!(s, "bigru_hidden = {}", self.bigru_hidden);
        let _ = writeln!(s, "n_classes = {}", self.n_classes);
        let _ = writeln!(s, "trial_left = {}", list(&self.trial_kernel_sizes.left));
        let _ = writeln!(s, "trial_center = {}", list(&self.trial_kernel_sizes.center));
        let _ = writeln!(s, "trial_right = {}", list(&self.trial_kernel_sizes.right));
        let _ = writeln!(s, "trial_channels = {}", self.trial_channels);
        let _ = writeln!(s, "conv_kernel = {}", self.conv_kernel);
        let _ = writeln!(s, "ff_mult = {}", self.ff_mult);
        let _ = writeln!(s, "n_mels = {}", self.n_mels);
        if !self.class_names.is_empty() {
            let _ = writeln!(s, "class_names = {}", self.class_names.join(","));
        }
        s
    }

    /// Parses the flat text format. `preset = <name>` may appear first to
    /// start from a preset; later keys override it.
    pub fn from_config_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: Option<ReneConfig> = None;
        let mut pending: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k == "preset" {
                cfg = Some(preset_config(&v)?);
            } else {
                pending.push((i + 1, k, v));
            }
        }
        let mut cfg = cfg.unwrap_or_else(|| preset_config("toy").expect("toy preset"));
        for (line, k, v) in pending {
            let perr = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line,
                msg,
            };
            let num = |v: &str| v.parse::<usize>().map_err(|_| perr(format!("{k}: not a count: {v:?}")));
            let list = |v: &str| -> Result<Vec<usize>> {
                v.split(',')
                    .map(|p| p.trim().parse::<usize>().map_err(|_| perr(format!("{k}: bad list {v:?}"))))
                    .collect()
            };
            match k.as_str() {
                "whisper_layers" => cfg.whisper_layers = num(&v)?,
                "whisper_dim" => cfg.whisper_dim = num(&v)?,
                "whisper_heads" => cfg.whisper_heads = num(&v)?,
                "conformer_layers" => cfg.conformer_layers = num(&v)?,
                "conformer_dim" => cfg.conformer_dim = num(&v)?,
                "conformer_heads" => cfg.conformer_heads = num(&v)?,
                "bigru_hidden" => cfg.bigru_hidden = num(&v)?,
                "n_classes" => cfg.n_classes = num(&v)?,
                "trial_left" => cfg.trial_kernel_sizes.left = list(&v)?,
                "trial_center" => cfg.trial_kernel_sizes.center = list(&v)?,
                "trial_right" => cfg.trial_kernel_sizes.right = list(&v)?,
                "trial_channels" => cfg.trial_channels = num(&v)?,
                "conv_kernel" => cfg.conv_kernel = num(&v)?,
                "ff_mult" => cfg.ff_mult = num(&v)?,
                "n_mels" => cfg.n_mels = num(&v)?,
                "class_names" => {
                    cfg.class_names = v.split(',').map(|s| s.trim().to_string()).collect()
                }
                _ => return Err(perr(format!("unknown key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_config_text(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_text()).map_err(|e| Error::io(path, e))
    }
}
