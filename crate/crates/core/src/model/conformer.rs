use ndarray::Array2;

use super::blocks::{AttentionSublayer, AttentionSublayerCache, FeedForward, FeedForwardCache};
use super::ReneConfig;
use crate::error::{Error, Result};
use crate::nn::{
    AttentionConfig, Conv1d, DepthwiseConv1d, Gelu, Layer, LayerNorm, Linear, ParamSpec, ParameterSet,
};

type LnCache = <LayerNorm as Layer>::Cache;

/// `LN -> pointwise -> GELU -> depthwise(k) -> LN -> pointwise`, no residual.
#[derive(Debug, Clone)]
pub struct ConvModule {
    ln: LayerNorm,
    pw1: Linear,
    dw: DepthwiseConv1d,
    ln_dw: LayerNorm,
    pw2: Linear,
}

pub struct ConvModuleCache {
    ln: LnCache,
    x_pw1: Array2<f64>,
    pre_act: Array2<f64>,
    x_dw: Array2<f64>,
    ln_dw: LnCache,
    x_pw2: Array2<f64>,
}

impl ConvModule {
    pub fn new(name: &str, dim: usize, kernel: usize) -> Self {
        Self {
            ln: LayerNorm::new(format!("{name}.ln"), dim),
            pw1: Linear::new(format!("{name}.pw1"), dim, dim),
            dw: DepthwiseConv1d::new(format!("{name}.dw"), dim, kernel),
            ln_dw: LayerNorm::new(format!("{name}.ln_dw"), dim),
            pw2: Linear::new(format!("{name}.pw2"), dim, dim),
        }
    }
}

impl Layer for ConvModule {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = ConvModuleCache;

    fn forward(&self, p: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, ConvModuleCache)> {
        let (n, ln) = self.ln.forward(p, x)?;
        let (pre_act, x_pw1) = self.pw1.forward(p, &n)?;
        let (a, _) = Gelu.forward(p, &pre_act)?;
        let (d, x_dw) = self.dw.forward(p, &a)?;
        let (n2, ln_dw) = self.ln_dw.forward(p, &d)?;
        let (y, x_pw2) = self.pw2.forward(p, &n2)?;
        Ok((y, ConvModuleCache { ln, x_pw1, pre_act, x_dw, ln_dw, x_pw2 }))
    }

    fn backward(&self, p: &ParameterSet, c: &ConvModuleCache, dy: &Array2<f64>, g: &mut ParameterSet) -> Result<Array2<f64>> {
        let d = self.pw2.backward(p, &c.x_pw2, dy, g)?;
        let d = self.ln_dw.backward(p, &c.ln_dw, &d, g)?;
        let d = self.dw.backward(p, &c.x_dw, &d, g)?;
        let d = Gelu.backward(p, &c.pre_act, &d, g)?;
        let d = self.pw1.backward(p, &c.x_pw1, &d, g)?;
        self.ln.backward(p, &c.ln, &d, g)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.ln.param_specs();
        s.extend(self.pw1.param_specs());
        s.extend(self.dw.param_specs());
        s.extend(self.ln_dw.param_specs());
        s.extend(self.pw2.param_specs());
        s
    }
}

/// Macaron block: half-step feed-forward, self-attention, convolution module,
/// second half-step feed-forward, final norm. Every sublayer is residual.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    ff1: FeedForward,
    attn: AttentionSublayer,
    conv: ConvModule,
    ff2: FeedForward,
    ln_out: LayerNorm,
}

pub struct ConformerBlockCache {
    ff1: FeedForwardCache,
    /// Residual stream after the first half-step feed-forward.
    pub after_ff1: Array2<f64>,
    attn: AttentionSublayerCache,
    conv: ConvModuleCache,
    ff2: FeedForwardCache,
    ln_out: LnCache,
}

impl ConformerBlock {
    pub fn new(name: &str, cfg: AttentionConfig, ff_mult: usize, kernel: usize) -> Self {
        let d = cfg.model_dim;
        Self {
            ff1: FeedForward::new(&format!("{name}.ff1"), d, ff_mult),
            attn: AttentionSublayer::new(&format!("{name}.attn"), cfg),
            conv: ConvModule::new(&format!("{name}.conv"), d, kernel),
            ff2: FeedForward::new(&format!("{name}.ff2"), d, ff_mult),
            ln_out: LayerNorm::new(format!("{name}.ln_out"), d),
        }
    }
}

impl Layer for ConformerBlock {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = ConformerBlockCache;

    fn forward(&self, p: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, ConformerBlockCache)> {
        let (f, ff1) = self.ff1.forward(p, x)?;
        let x1 = x + &(f * 0.5);
        let (a, attn) = self.attn.forward(p, &x1)?;
        let x2 = &x1 + &a;
        let (cv, conv) = self.conv.forward(p, &x2)?;
        let x3 = x2 + &cv;
        let (f, ff2) = self.ff2.forward(p, &x3)?;
        let x4 = x3 + &(f * 0.5);
        let (y, ln_out) = self.ln_out.forward(p, &x4)?;
        Ok((y, ConformerBlockCache { ff1, after_ff1: x1, attn, conv, ff2, ln_out }))
    }

    fn backward(&self, p: &ParameterSet, c: &ConformerBlockCache, dy: &Array2<f64>, g: &mut ParameterSet) -> Result<Array2<f64>> {
        let dx4 = self.ln_out.backward(p, &c.ln_out, dy, g)?;
        let dx3 = &dx4 + &self.ff2.backward(p, &c.ff2, &(&dx4 * 0.5), g)?;
        let dx2 = &dx3 + &self.conv.backward(p, &c.conv, &dx3, g)?;
        let dx1 = &dx2 + &self.attn.backward(p, &c.attn, &dx2, g)?;
        Ok(&dx1 + &self.ff1.backward(p, &c.ff1, &(&dx1 * 0.5), g)?)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.ff1.param_specs();
        s.extend(self.attn.param_specs());
        s.extend(self.conv.param_specs());
        s.extend(self.ff2.param_specs());
        s.extend(self.ln_out.param_specs());
        s
    }
}

/// Two stride-2 convolutions (GELU after each), a linear projection, then
/// conformer blocks. Time shrinks by 4, rounding up at each stage.
#[derive(Debug, Clone)]
pub struct ConformerEncoder {
    sub1: Conv1d,
    sub2: Conv1d,
    proj: Linear,
    blocks: Vec<ConformerBlock>,
}

pub struct ConformerEncoderCache {
    sub1: <Conv1d as Layer>::Cache,
    pre1: Array2<f64>,
    sub2: <Conv1d as Layer>::Cache,
    pre2: Array2<f64>,
    proj: Array2<f64>,
    pub blocks: Vec<ConformerBlockCache>,
}

impl ConformerEncoder {
    pub fn new(cfg: &ReneConfig) -> Result<Self> {
        let att = cfg.conformer_attention()?;
        let (wd, cd) = (cfg.whisper_dim, cfg.conformer_dim);
        Ok(Self {
            sub1: Conv1d::new("conformer.subsample.conv1", wd, cd, 3, 2, 1),
            sub2: Conv1d::new("conformer.subsample.conv2", cd, cd, 3, 2, 1),
            proj: Linear::new("conformer.proj", cd, cd),
            blocks: (0..cfg.conformer_layers)
                .map(|i| ConformerBlock::new(&format!("conformer.blocks.{i}"), att, cfg.ff_mult, cfg.conv_kernel))
                .collect(),
        })
    }

    pub fn out_len(n: usize) -> usize {
        n.div_ceil(2).div_ceil(2)
    }
}

impl Layer for ConformerEncoder {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = ConformerEncoderCache;

    fn forward(&self, p: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, ConformerEncoderCache)> {
        if x.nrows() < 4 {
            return Err(Error::too_short(format!(
                "conformer subsampling needs at least 4 steps, got {}",
                x.nrows()
            )));
        }
        let (pre1, sub1) = self.sub1.forward(p, x)?;
        let (h, _) = Gelu.forward(p, &pre1)?;
        let (pre2, sub2) = self.sub2.forward(p, &h)?;
        let (h, _) = Gelu.forward(p, &pre2)?;
        let (mut h, proj) = self.proj.forward(p, &h)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(p, &h)?;
            blocks.push(c);
            h = y;
        }
        Ok((h, ConformerEncoderCache { sub1, pre1, sub2, pre2, proj, blocks }))
    }

    fn backward(&self, p: &ParameterSet, c: &ConformerEncoderCache, dy: &Array2<f64>, g: &mut ParameterSet) -> Result<Array2<f64>> {
        let mut d = dy.clone();
        for (b, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            d = b.backward(p, bc, &d, g)?;
        }
        let d = self.proj.backward(p, &c.proj, &d, g)?;
        let d = Gelu.backward(p, &c.pre2, &d, g)?;
        let d = self.sub2.backward(p, &c.sub2, &d, g)?;
        let d = Gelu.backward(p, &c.pre1, &d, g)?;
        self.sub1.backward(p, &c.sub1, &d, g)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.sub1.param_specs();
        s.extend(self.sub2.param_specs());
        s.extend(self.proj.param_specs());
        for b in &self.blocks {
            s.extend(b.param_specs());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, probe_loss, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input(t: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((t, d), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn first_feed_forward_is_a_half_step() {
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let block = ConformerBlock::new("c", cfg, 4, 3);
        let p = ParameterSet::init(&block.param_specs(), 3).unwrap();
        let x = input(6, 8, 4);
        let ff = FeedForward::new("c.ff1", 8, 4);
        let f = ff.infer(&p, &x).unwrap();
        let (_, cache) = block.forward(&p, &x).unwrap();
        let expected = &x + &(f * 0.5);
        for (a, b) in cache.after_ff1.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_sublayer_outputs_reduce_to_the_final_norm() {
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let block = ConformerBlock::new("c", cfg, 4, 3);
        let mut p = ParameterSet::init(&block.param_specs(), 3).unwrap();
        for name in ["c.ff1.fc2.weight", "c.attn.mhsa.out.weight", "c.conv.pw2.weight", "c.ff2.fc2.weight"] {
            p.get_mut(name).unwrap().fill(0.0);
        }
        let x = input(6, 8, 4);
        let expected = LayerNorm::new("c.ln_out", 8).infer(&p, &x).unwrap();
        assert_eq!(block.infer(&p, &x).unwrap(), expected);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let block = ConformerBlock::new("c", cfg, 2, 3);
        let p = ParameterSet::init(&block.param_specs(), 9).unwrap();
        let r = grad_check(&block, &p, &input(5, 8, 10), probe_loss(11), &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn subsampling_lengths() {
        assert_eq!(ConformerEncoder::out_len(499), 125);
        assert_eq!(ConformerEncoder::out_len(4), 1);
        assert_eq!(ConformerEncoder::out_len(50), 13);
    }

    #[test]
    fn short_sequences_are_rejected() {
        let mut cfg = super::super::preset_config("toy").unwrap();
        cfg.whisper_dim = 8;
        cfg.conformer_dim = 8;
        let enc = ConformerEncoder::new(&cfg).unwrap();
        let p = ParameterSet::init(&enc.param_specs(), 0).unwrap();
        assert!(matches!(enc.forward(&p, &input(3, 8, 0)), Err(Error::TooShort(_))));
        assert_eq!(enc.infer(&p, &input(4, 8, 0)).unwrap().dim(), (1, 8));
    }
}
