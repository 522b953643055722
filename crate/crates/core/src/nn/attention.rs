use ndarray::{s, Array2};

use super::activation::softmax_rows_backward;
use super::{softmax_rows, Layer, Linear, ParamSpec, ParameterSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !model_dim.is_multiple_of(n_heads) {
            return Err(Error::invalid(format!(
                "model dim {model_dim} is not divisible by {n_heads} heads"
            )));
        }
        Ok(Self { model_dim, n_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

/// Scaled dot-product self-attention over `T x model_dim`, with q/k/v/out projections.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub name: String,
    pub cfg: AttentionConfig,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per head, each `T x T`.
    pub weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl MultiHeadSelfAttention {
    pub fn new(name: impl Into<String>, cfg: AttentionConfig) -> Self {
        let name = name.into();
        let d = cfg.model_dim;
        Self {
            q: Linear::new(format!("{name}.q"), d, d),
            k: Linear::new(format!("{name}.k"), d, d),
            v: Linear::new(format!("{name}.v"), d, d),
            out: Linear::new(format!("{name}.out"), d, d),
            name,
            cfg,
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.cfg.head_dim() as f64).sqrt()
    }
}

impl Layer for MultiHeadSelfAttention {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = AttentionCache;

    fn forward(&self, params: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, AttentionCache)> {
        if x.ncols() != self.cfg.model_dim {
            return Err(Error::invalid(format!(
                "{}: expected width {}, got {}",
                self.name,
                self.cfg.model_dim,
                x.ncols()
            )));
        }
        let q = self.q.infer(params, x)?;
        let k = self.k.infer(params, x)?;
        let v = self.v.infer(params, x)?;
        let dh = self.cfg.head_dim();
        let scale = self.scale();
        let mut concat = Array2::zeros(x.raw_dim());
        let mut weights = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let a = softmax_rows(&scores);
            concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            weights.push(a);
        }
        let (y, _) = self.out.forward(params, &concat)?;
        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                weights,
                concat,
            },
        ))
    }

    fn backward(&self, params: &ParameterSet, c: &AttentionCache, dy: &Array2<f64>, grads: &mut ParameterSet) -> Result<Array2<f64>> {
        let dconcat = self.out.backward(params, &c.concat, dy, grads)?;
        let dh = self.cfg.head_dim();
        let scale = self.scale();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, a) in c.weights.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_o = dconcat.slice(cols);
            let da = d_o.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&d_o));
            let ds = softmax_rows_backward(a, &da) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut dx = self.q.backward(params, &c.x, &dq, grads)?;
        dx += &self.k.backward(params, &c.x, &dk, grads)?;
        dx += &self.v.backward(params, &c.x, &dv, grads)?;
        Ok(dx)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        [&self.q, &self.k, &self.v, &self.out]
            .iter()
            .flat_map(|l| l.param_specs())
            .collect()
    }
}
