use ndarray::Array2;

use super::blocks::{ResidualAttentionBlock, ResidualAttentionCache};
use super::ReneConfig;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positional_embedding, Conv1d, Gelu, Layer, LayerNorm, ParamSpec, ParameterSet};

/// Log-mel encoder: two convolutions (the second halving time), sinusoidal
/// positions, pre-norm attention blocks and a final norm. `T x n_mels` in,
/// `ceil(T/2) x dim` out.
#[derive(Debug, Clone)]
pub struct WhisperEncoder {
    conv1: Conv1d,
    conv2: Conv1d,
    blocks: Vec<ResidualAttentionBlock>,
    ln_post: LayerNorm,
    dim: usize,
}

pub struct EncoderCache {
    conv1: <Conv1d as Layer>::Cache,
    pre1: Array2<f64>,
    conv2: <Conv1d as Layer>::Cache,
    pre2: Array2<f64>,
    blocks: Vec<ResidualAttentionCache>,
    ln_post: <LayerNorm as Layer>::Cache,
}

impl WhisperEncoder {
    pub fn new(cfg: &ReneConfig) -> Result<Self> {
        let att = cfg.whisper_attention()?;
        let d = cfg.whisper_dim;
        Ok(Self {
            conv1: Conv1d::new("encoder.conv1", cfg.n_mels, d, 3, 1, 1),
            conv2: Conv1d::new("encoder.conv2", d, d, 3, 2, 1),
            blocks: (0..cfg.whisper_layers)
                .map(|i| ResidualAttentionBlock::new(&format!("encoder.blocks.{i}"), att, cfg.ff_mult))
                .collect(),
            ln_post: LayerNorm::new("encoder.ln_post", d),
            dim: d,
        })
    }

    pub fn out_len(n_frames: usize) -> usize {
        n_frames.div_ceil(2)
    }
}

impl Layer for WhisperEncoder {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = EncoderCache;

    fn forward(&self, p: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, EncoderCache)> {
        if x.nrows() == 0 {
            return Err(Error::too_short("encoder input has no frames"));
        }
        let (pre1, conv1) = self.conv1.forward(p, x)?;
        let (h, _) = Gelu.forward(p, &pre1)?;
        let (pre2, conv2) = self.conv2.forward(p, &h)?;
        let (h, _) = Gelu.forward(p, &pre2)?;
        let mut h = h + &sinusoidal_positional_embedding(pre2.nrows(), self.dim)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(p, &h)?;
            caches.push(c);
            h = y;
        }
        let (y, ln_post) = self.ln_post.forward(p, &h)?;
        Ok((
            y,
            EncoderCache {
                conv1,
                pre1,
                conv2,
                pre2,
                blocks: caches,
                ln_post,
            },
        ))
    }

    fn backward(&self, p: &ParameterSet, c: &EncoderCache, dy: &Array2<f64>, g: &mut ParameterSet) -> Result<Array2<f64>> {
        let mut d = self.ln_post.backward(p, &c.ln_post, dy, g)?;
        for (b, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            d = b.backward(p, bc, &d, g)?;
        }
        let d = Gelu.backward(p, &c.pre2, &d, g)?;
        let d = self.conv2.backward(p, &c.conv2, &d, g)?;
        let d = Gelu.backward(p, &c.pre1, &d, g)?;
        self.conv1.backward(p, &c.conv1, &d, g)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.conv1.param_specs();
        s.extend(self.conv2.param_specs());
        for b in &self.blocks {
            s.extend(b.param_specs());
        }
        s.extend(self.ln_post.param_specs());
        s
    }
}
