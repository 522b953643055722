use ndarray::{Array1, Array2, Array3, Axis};

use super::ReneConfig;
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_derivative, DepthwiseSeparableConv2d, Layer, Linear, ParamSpec, ParameterSet};

/// Receptive field of a stride-1 convolution stack: `1 + sum(k - 1)`.
pub fn receptive_field(kernels: &[usize]) -> usize {
    1 + kernels.iter().map(|k| k.saturating_sub(1)).sum::<usize>()
}

/// A chain of depthwise-separable convolutions with GELU between them.
#[derive(Debug, Clone)]
struct Branch {
    convs: Vec<DepthwiseSeparableConv2d>,
}

struct BranchCache {
    convs: Vec<<DepthwiseSeparableConv2d as Layer>::Cache>,
    pre_acts: Vec<Array3<f64>>,
}

impl Branch {
    fn new(name: &str, kernels: &[usize], channels: usize) -> Self {
        let convs = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let c_in = if i == 0 { 1 } else { channels };
                DepthwiseSeparableConv2d::new(format!("{name}.{i}"), c_in, channels, k)
            })
            .collect();
        Self { convs }
    }

    fn forward(&self, p: &ParameterSet, x: &Array3<f64>) -> Result<(Array3<f64>, BranchCache)> {
        let mut h = x.clone();
        let mut convs = Vec::new();
        let mut pre_acts = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                let act = gelu(&h);
                pre_acts.push(h);
                h = act;
            }
            let (y, c) = conv.forward(p, &h)?;
            convs.push(c);
            h = y;
        }
        Ok((h, BranchCache { convs, pre_acts }))
    }

    fn backward(&self, p: &ParameterSet, c: &BranchCache, dy: &Array3<f64>, g: &mut ParameterSet) -> Result<Array3<f64>> {
        let mut d = dy.clone();
        for i in (0..self.convs.len()).rev() {
            d = self.convs[i].backward(p, &c.convs[i], &d, g)?;
            if i > 0 {
                d = c.pre_acts[i - 1].mapv(gelu_derivative) * &d;
            }
        }
        Ok(d)
    }
}

/// Three-branch head over the decoder's `1 x rows x cols` feature map.
///
/// The left branch runs kernels large to small, the right small to large and
/// the center passes the map through unchanged (broadcast to every channel).
/// The branches are summed, averaged over space and classified by a linear
/// layer.
#[derive(Debug, Clone)]
pub struct TrialBlock {
    left: Branch,
    right: Branch,
    head: Linear,
    channels: usize,
    max_kernel: usize,
}

pub struct TrialCache {
    pub left: Array3<f64>,
    pub center: Array3<f64>,
    pub right: Array3<f64>,
    left_cache: BranchCache,
    right_cache: BranchCache,
    pooled: Array2<f64>,
    hw: (usize, usize),
}

impl TrialBlock {
    pub fn new(cfg: &ReneConfig) -> Self {
        let t = &cfg.trial_kernel_sizes;
        let c = cfg.trial_channels;
        Self {
            left: Branch::new("trial.left", &t.left, c),
            right: Branch::new("trial.right", &t.right, c),
            head: Linear::new("trial.head", c, cfg.n_classes),
            channels: c,
            max_kernel: cfg.largest_trial_kernel(),
        }
    }
}

impl Layer for TrialBlock {
    type Input = Array3<f64>;
    type Output = Array1<f64>;
    type Cache = TrialCache;

    fn forward(&self, p: &ParameterSet, x: &Array3<f64>) -> Result<(Array1<f64>, TrialCache)> {
        let (ch, h, w) = x.dim();
        if ch != 1 {
            return Err(Error::invalid(format!("trial block expects one input channel, got {ch}")));
        }
        if h.min(w) < self.max_kernel {
            return Err(Error::too_short(format!(
                "feature map {h}x{w} is smaller than the largest trial kernel {}",
                self.max_kernel
            )));
        }
        let (left, left_cache) = self.left.forward(p, x)?;
        let (right, right_cache) = self.right.forward(p, x)?;
        let center = x.broadcast((self.channels, h, w)).expect("single channel").to_owned();
        let sum = &left + &center + &right;
        let pooled = sum
            .mean_axis(Axis(2))
            .and_then(|m| m.mean_axis(Axis(1)))
            .expect("non-empty map")
            .insert_axis(Axis(0));
        let (logits, _) = self.head.forward(p, &pooled)?;
        Ok((
            logits.row(0).to_owned(),
            TrialCache {
                left,
                center,
                right,
                left_cache,
                right_cache,
                pooled,
                hw: (h, w),
            },
        ))
    }

    fn backward(&self, p: &ParameterSet, c: &TrialCache, dy: &Array1<f64>, g: &mut ParameterSet) -> Result<Array3<f64>> {
        let dy2 = dy.view().insert_axis(Axis(0)).to_owned();
        let dpool = self.head.backward(p, &c.pooled, &dy2, g)?;
        let (h, w) = c.hw;
        let scale = 1.0 / (h * w) as f64;
        let dsum = dpool
            .row(0)
            .mapv(|v| v * scale)
            .into_shape_with_order((self.channels, 1, 1))
            .expect("vector")
            .broadcast((self.channels, h, w))
            .expect("broadcast")
            .to_owned();
        let mut dx = dsum.sum_axis(Axis(0)).insert_axis(Axis(0));
        dx += &self.left.backward(p, &c.left_cache, &dsum, g)?;
        dx += &self.right.backward(p, &c.right_cache, &dsum, g)?;
        Ok(dx)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s: Vec<ParamSpec> = self.left.convs.iter().flat_map(|c| c.param_specs()).collect();
        s.extend(self.right.convs.iter().flat_map(|c| c.param_specs()));
        s.extend(self.head.param_specs());
        s
    }
}
