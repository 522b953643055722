use ndarray::{Array2, ArrayD, Axis, Dimension, Array};

use super::{Layer, ParamSpec, ParameterSet};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn gelu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(gelu_scalar)
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(x: &ArrayD<f64>, axis: usize) -> Result<ArrayD<f64>> {
    if axis >= x.ndim() {
        return Err(Error::invalid(format!("softmax axis {axis} out of range for rank {}", x.ndim())));
    }
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    Ok(out)
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Elementwise GELU as a layer over `T x dim` inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct Gelu;

impl Layer for Gelu {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = Array2<f64>;

    fn forward(&self, _: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((gelu(x), x.clone()))
    }

    fn backward(&self, _: &ParameterSet, x: &Array2<f64>, dy: &Array2<f64>, _: &mut ParameterSet) -> Result<Array2<f64>> {
        Ok(x.mapv(gelu_derivative) * dy)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
}

/// Row-wise softmax as a layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct SoftmaxRows;

impl Layer for SoftmaxRows {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = Array2<f64>;

    fn forward(&self, _: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let y = softmax_rows(x);
        Ok((y.clone(), y))
    }

    fn backward(&self, _: &ParameterSet, y: &Array2<f64>, dy: &Array2<f64>, _: &mut ParameterSet) -> Result<Array2<f64>> {
        Ok(softmax_rows_backward(y, dy))
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
}

/// Gradient through a row softmax given its output `y`.
pub(crate) fn softmax_rows_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let dots = (y * dy).sum_axis(Axis(1)).insert_axis(Axis(1));
    y * &(dy - &dots)
}
