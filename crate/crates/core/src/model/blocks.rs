use ndarray::Array2;

use crate::error::Result;
use crate::nn::{
    AttentionConfig, Gelu, Layer, LayerNorm, Linear, MultiHeadSelfAttention, ParamSpec, ParameterSet,
};

type LnCache = <LayerNorm as Layer>::Cache;
type AttCache = <MultiHeadSelfAttention as Layer>::Cache;

/// Pre-norm position-wise MLP: `LN -> Linear(d, m d) -> GELU -> Linear(m d, d)`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct FeedForwardCache {
    ln: LnCache,
    x_fc1: Array2<f64>,
    pre_act: Array2<f64>,
    x_fc2: Array2<f64>,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, mult: usize) -> Self {
        Self {
            ln: LayerNorm::new(format!("{name}.ln"), dim),
            fc1: Linear::new(format!("{name}.fc1"), dim, dim * mult),
            fc2: Linear::new(format!("{name}.fc2"), dim * mult, dim),
        }
    }
}

impl Layer for FeedForward {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = FeedForwardCache;

    fn forward(&self, p: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, FeedForwardCache)> {
        let (n, ln) = self.ln.forward(p, x)?;
        let (pre_act, x_fc1) = self.fc1.forward(p, &n)?;
        let (act, _) = Gelu.forward(p, &pre_act)?;
        let (y, x_fc2) = self.fc2.forward(p, &act)?;
        Ok((y, FeedForwardCache { ln, x_fc1, pre_act, x_fc2 }))
    }

    fn backward(&self, p: &ParameterSet, c: &FeedForwardCache, dy: &Array2<f64>, g: &mut ParameterSet) -> Result<Array2<f64>> {
        let d_act = self.fc2.backward(p, &c.x_fc2, dy, g)?;
        let d_pre = Gelu.backward(p, &c.pre_act, &d_act, g)?;
        let d_n = self.fc1.backward(p, &c.x_fc1, &d_pre, g)?;
        self.ln.backward(p, &c.ln, &d_n, g)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.ln.param_specs();
        s.extend(self.fc1.param_specs());
        s.extend(self.fc2.param_specs());
        s
    }
}

/// Pre-norm attention sublayer `LN -> MHSA`, without the residual.
#[derive(Debug, Clone)]
pub(crate) struct AttentionSublayer {
    ln: LayerNorm,
    attn: MultiHeadSelfAttention,
}

pub(crate) struct AttentionSublayerCache {
    ln: LnCache,
    pub(crate) attn: AttCache,
}

impl AttentionSublayer {
    pub(crate) fn new(name: &str, cfg: AttentionConfig) -> Self {
        Self {
            ln: LayerNorm::new(format!("{name}.ln"), cfg.model_dim),
            attn: MultiHeadSelfAttention::new(format!("{name}.mhsa"), cfg),
        }
    }
}

impl Layer for AttentionSublayer {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = AttentionSublayerCache;

    fn forward(&self, p: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, AttentionSublayerCache)> {
        let (n, ln) = self.ln.forward(p, x)?;
        let (y, attn) = self.attn.forward(p, &n)?;
        Ok((y, AttentionSublayerCache { ln, attn }))
    }

    fn backward(&self, p: &ParameterSet, c: &AttentionSublayerCache, dy: &Array2<f64>, g: &mut ParameterSet) -> Result<Array2<f64>> {
        let dn = self.attn.backward(p, &c.attn, dy, g)?;
        self.ln.backward(p, &c.ln, &dn, g)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.ln.param_specs();
        s.extend(self.attn.param_specs());
        s
    }
}

/// `x + MHSA(LN(x))` followed by `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct ResidualAttentionBlock {
    attn: AttentionSublayer,
    mlp: FeedForward,
}

pub struct ResidualAttentionCache {
    attn: AttentionSublayerCache,
    mlp: FeedForwardCache,
}

impl ResidualAttentionBlock {
    pub fn new(name: &str, cfg: AttentionConfig, ff_mult: usize) -> Self {
        Self {
            attn: AttentionSublayer::new(&format!("{name}.attn"), cfg),
            mlp: FeedForward::new(&format!("{name}.mlp"), cfg.model_dim, ff_mult),
        }
    }
}

impl Layer for ResidualAttentionBlock {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = ResidualAttentionCache;

    fn forward(&self, p: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, ResidualAttentionCache)> {
        let (a, attn) = self.attn.forward(p, x)?;
        let x1 = x + &a;
        let (m, mlp) = self.mlp.forward(p, &x1)?;
        Ok((x1 + &m, ResidualAttentionCache { attn, mlp }))
    }

    fn backward(&self, p: &ParameterSet, c: &ResidualAttentionCache, dy: &Array2<f64>, g: &mut ParameterSet) -> Result<Array2<f64>> {
        let dx1 = dy + &self.mlp.backward(p, &c.mlp, dy, g)?;
        Ok(&dx1 + &self.attn.backward(p, &c.attn, &dx1, g)?)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.attn.param_specs();
        s.extend(self.mlp.param_specs());
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
    fn zero_output_projections_make_identity() {
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let block = ResidualAttentionBlock::new("b", cfg, 4);
        let mut p = ParameterSet::init(&block.param_specs(), 1).unwrap();
        for name in ["b.attn.mhsa.out.weight", "b.mlp.fc2.weight"] {
            p.get_mut(name).unwrap().fill(0.0);
        }
        let x = input(5, 8, 2);
        assert_eq!(block.infer(&p, &x).unwrap(), x);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let block = ResidualAttentionBlock::new("b", cfg, 2);
        let p = ParameterSet::init(&block.param_specs(), 5).unwrap();
        let r = grad_check(&block, &p, &input(4, 8, 6), probe_loss(7), &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
