use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::{Init, Layer, ParamSpec, ParameterSet};
use crate::error::{Error, Result};

/// `y = x W + b` with `W: d_in x d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }
}

impl Layer for Linear {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = Array2<f64>;

    fn forward(&self, params: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.ncols() != self.d_in {
            return Err(Error::invalid(format!(
                "{}: expected {} input features, got {}",
                self.name,
                self.d_in,
                x.ncols()
            )));
        }
        let w = params.view2(&self.weight())?;
        let b = params.view1(&self.bias())?;
        let y = x.dot(&w) + b;
        Ok((y, x.clone()))
    }

    fn backward(&self, params: &ParameterSet, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut ParameterSet) -> Result<Array2<f64>> {
        let w = params.view2(&self.weight())?;
        grads.view2_mut(&self.weight())?.scaled_add(1.0, &x.t().dot(dy));
        grads.view1_mut(&self.bias())?.scaled_add(1.0, &dy.sum_axis(Axis(0)));
        Ok(dy.dot(&w.t()))
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(self.weight(), &[self.d_in, self.d_out], Init::Xavier { fan_in: self.d_in, fan_out: self.d_out }),
            ParamSpec::new(self.bias(), &[self.d_out], Init::Zeros),
        ]
    }
}

/// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
pub fn layer_norm(x: &Array2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>, eps: f64) -> Array2<f64> {
    let (xhat, _) = normalize_rows(x, eps);
    xhat * gain + bias
}

fn normalize_rows(x: &Array2<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        *inv = 1.0 / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| (v - mean) * s);
    }
    (xhat, inv_std)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            eps: 1e-5,
        }
    }

    fn gain(&self) -> String {
        format!("{}.gain", self.name)
    }

    fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl Layer for LayerNorm {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = LayerNormCache;

    fn forward(&self, params: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, LayerNormCache)> {
        if x.ncols() != self.dim {
            return Err(Error::invalid(format!(
                "{}: expected width {}, got {}",
                self.name,
                self.dim,
                x.ncols()
            )));
        }
        let (xhat, inv_std) = normalize_rows(x, self.eps);
        let y = &xhat * &params.view1(&self.gain())? + params.view1(&self.bias())?;
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    fn backward(&self, params: &ParameterSet, cache: &LayerNormCache, dy: &Array2<f64>, grads: &mut ParameterSet) -> Result<Array2<f64>> {
        let gain = params.view1(&self.gain())?;
        grads.view1_mut(&self.gain())?.scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
        grads.view1_mut(&self.bias())?.scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let dxhat = dy * &gain;
        let n = self.dim as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = inv / n * (n * gi - sum_g - xi * sum_gx);
            }
        }
        Ok(dx)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(self.gain(), &[self.dim], Init::Ones),
            ParamSpec::new(self.bias(), &[self.dim], Init::Zeros),
        ]
    }
}

/// Interleaved table: `(p, 2i) = sin(p / 10000^(2i/dim))`, `(p, 2i+1) = cos(...)`.
pub fn sinusoidal_positional_embedding(seq_len: usize, dim: usize) -> Result<Array2<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("positional embedding dim {dim} must be even")));
    }
    Ok(Array2::from_shape_fn((seq_len, dim), |(p, j)| {
        let i = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&array![[1.0, 3.0]], Array1::ones(2).view(), Array1::zeros(2).view(), 1e-5);
        assert!((y[[0, 0]] + 1.0).abs() < 1e-3 && (y[[0, 1]] - 1.0).abs() < 1e-3);
        let y = layer_norm(&array![[4.0, 4.0, 4.0]], Array1::ones(3).view(), Array1::zeros(3).view(), 1e-5);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_moments() {
        let x = Array2::from_shape_fn((5, 16), |(i, j)| ((i * 16 + j) as f64 * 1.37).sin() * 3.0 + i as f64);
        let y = layer_norm(&x, Array1::ones(16).view(), Array1::zeros(16).view(), 1e-12);
        for row in y.rows() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn positional_embedding() {
        let pe = sinusoidal_positional_embedding(50, 16).unwrap();
        for j in 0..16 {
            assert_eq!(pe[[0, j]], if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        for p in [1usize, 7, 49] {
            for i in 0..8 {
                let direct = (p as f64 / 10000f64.powf(2.0 * i as f64 / 16.0)).sin();
                assert!((pe[[p, 2 * i]] - direct).abs() < 1e-12);
            }
        }
        assert!(sinusoidal_positional_embedding(4, 5).is_err());
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let l = Linear::new("l", 3, 2);
        let p = ParameterSet::init(&l.param_specs(), 0).unwrap();
        assert!(l.forward(&p, &Array2::zeros((1, 4))).is_err());
    }

    #[test]
    fn zero_input_gives_zero_weight_gradient() {
        let l = Linear::new("l", 3, 2);
        let p = ParameterSet::init(&l.param_specs(), 0).unwrap();
        let x = Array2::zeros((4, 3));
        let (_, cache) = l.forward(&p, &x).unwrap();
        let mut g = p.zeros_like();
        l.backward(&p, &cache, &Array2::ones((4, 2)), &mut g).unwrap();
        assert!(g.get("l.weight").unwrap().iter().all(|&v| v == 0.0));
        assert!(g.get("l.bias").unwrap().iter().all(|&v| v == 4.0));
    }
}
