//! Dense layers with forward passes and hand-written parameter gradients.
//!
//! Every layer reads its weights by name from a [`ParameterSet`] and writes
//! gradients into a second set with the same names. Sequences are `T x dim`
//! matrices; 2D feature maps are `channels x height x width`.

mod activation;
mod attention;
mod conv;
mod gradcheck;
mod gru;
mod linear;
mod params;

pub use activation::{gelu, gelu_derivative, gelu_scalar, softmax, softmax_rows, Gelu, SoftmaxRows};
pub use attention::{AttentionConfig, MultiHeadSelfAttention};
pub use conv::{
    conv1d, depthwise_separable_conv2d, Conv1d, DepthwiseConv1d, DepthwiseSeparableConv2d,
};
pub use gradcheck::{grad_check, probe_loss, GradCheckOptions, GradCheckReport};
pub use gru::{BiGru, Gru, GruCell};
pub use linear::{layer_norm, sinusoidal_positional_embedding, LayerNorm, Linear};
pub use params::{Init, ParamSpec, ParameterSet, Tensor};

use ndarray::{Array, Dimension};

use crate::error::Result;

/// A differentiable building block.
///
/// `backward` receives the cache produced by the matching `forward` call and
/// the gradient of the loss with respect to the output. It accumulates
/// parameter gradients into `grads` and returns the input gradient.
pub trait Layer {
    type Input;
    type Output;
    type Cache;

    fn forward(&self, params: &ParameterSet, input: &Self::Input) -> Result<(Self::Output, Self::Cache)>;

    fn backward(
        &self,
        params: &ParameterSet,
        cache: &Self::Cache,
        grad_out: &Self::Output,
        grads: &mut ParameterSet,
    ) -> Result<Self::Input>;

    fn param_specs(&self) -> Vec<ParamSpec>;

    fn infer(&self, params: &ParameterSet, input: &Self::Input) -> Result<Self::Output> {
        self.forward(params, input).map(|(y, _)| y)
    }
}

/// Flattening used by the gradient checker to perturb inputs and weight outputs.
pub trait Flat: Sized {
    fn to_flat(&self) -> Vec<f64>;
    /// Rebuilds a value with `self`'s shape from `values`.
    fn with_values(&self, values: &[f64]) -> Self;
}

impl<D: Dimension> Flat for Array<f64, D> {
    fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    fn with_values(&self, values: &[f64]) -> Self {
        Array::from_shape_vec(self.raw_dim(), values.to_vec()).expect("length matches shape")
    }
}

impl<A: Flat, B: Flat> Flat for (A, B) {
    fn to_flat(&self) -> Vec<f64> {
        let mut v = self.0.to_flat();
        v.extend(self.1.to_flat());
        v
    }

    fn with_values(&self, values: &[f64]) -> Self {
        let n = self.0.to_flat().len();
        (self.0.with_values(&values[..n]), self.1.with_values(&values[n..]))
    }
}
