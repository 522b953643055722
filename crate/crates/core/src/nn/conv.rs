use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use super::{Init, Layer, ParamSpec, ParameterSet};
use crate::error::{Error, Result};

/// Output length of a 1D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

// Rows are output positions, columns are (tap, channel) pairs, tap-major.
fn im2col(x: ArrayView2<f64>, kernel: usize, stride: usize, padding: usize, out_len: usize) -> Array2<f64> {
    let c_in = x.ncols();
    let mut cols = Array2::zeros((out_len, kernel * c_in));
    for t in 0..out_len {
        for j in 0..kernel {
            let src = (t * stride + j) as isize - padding as isize;
            if src >= 0 && (src as usize) < x.nrows() {
                cols.slice_mut(s![t, j * c_in..(j + 1) * c_in]).assign(&x.row(src as usize));
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, len: usize, c_in: usize, kernel: usize, stride: usize, padding: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((len, c_in));
    for t in 0..dcols.nrows() {
        for j in 0..kernel {
            let src = (t * stride + j) as isize - padding as isize;
            if src >= 0 && (src as usize) < len {
                let mut row = dx.row_mut(src as usize);
                row += &dcols.slice(s![t, j * c_in..(j + 1) * c_in]);
            }
        }
    }
    dx
}

/// Cross-correlation of a `L x c_in` sequence with a `k x c_in x c_out` kernel.
pub fn conv1d(
    x: &Array2<f64>,
    kernel: &Array3<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    padding: usize,
) -> Result<Array2<f64>> {
    let (k, c_in, c_out) = kernel.dim();
    if x.ncols() != c_in {
        return Err(Error::invalid(format!("conv1d expects {c_in} channels, got {}", x.ncols())));
    }
    let out_len = conv_out_len(x.nrows(), k, stride, padding).ok_or_else(|| {
        Error::invalid(format!(
            "kernel of width {k} is wider than the padded input ({} + 2*{padding})",
            x.nrows()
        ))
    })?;
    let cols = im2col(x.view(), k, stride, padding, out_len);
    let w = kernel
        .view()
        .into_shape_with_order((k * c_in, c_out))
        .expect("contiguous kernel");
    let mut y = cols.dot(&w);
    if let Some(b) = bias {
        y += b;
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        conv_out_len(len, self.kernel, self.stride, self.padding)
    }

    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }
}

pub struct Conv1dCache {
    cols: Array2<f64>,
    len: usize,
}

impl Layer for Conv1d {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = Conv1dCache;

    fn forward(&self, params: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, Conv1dCache)> {
        if x.ncols() != self.c_in {
            return Err(Error::invalid(format!(
                "{}: expected {} channels, got {}",
                self.name,
                self.c_in,
                x.ncols()
            )));
        }
        let out_len = self.out_len(x.nrows()).ok_or_else(|| {
            Error::invalid(format!("{}: input of length {} is shorter than the kernel", self.name, x.nrows()))
        })?;
        let w = params.view3(&self.weight())?;
        let w = w
            .into_shape_with_order((self.kernel * self.c_in, self.c_out))
            .map_err(|_| Error::invalid(format!("{}: bad weight shape", self.name)))?;
        let cols = im2col(x.view(), self.kernel, self.stride, self.padding, out_len);
        let y = cols.dot(&w) + params.view1(&self.bias())?;
        Ok((y, Conv1dCache { cols, len: x.nrows() }))
    }

    fn backward(&self, params: &ParameterSet, cache: &Conv1dCache, dy: &Array2<f64>, grads: &mut ParameterSet) -> Result<Array2<f64>> {
        let shape = (self.kernel * self.c_in, self.c_out);
        let w = params.view3(&self.weight())?.into_shape_with_order(shape).expect("contiguous");
        let dw = cache.cols.t().dot(dy);
        grads
            .view3_mut(&self.weight())?
            .into_shape_with_order(shape)
            .expect("contiguous")
            .scaled_add(1.0, &dw);
        grads.view1_mut(&self.bias())?.scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let dcols = dy.dot(&w.t());
        Ok(col2im(&dcols, cache.len, self.c_in, self.kernel, self.stride, self.padding))
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let fan_in = self.c_in * self.kernel;
        let fan_out = self.c_out * self.kernel;
        vec![
            ParamSpec::new(self.weight(), &[self.kernel, self.c_in, self.c_out], Init::Xavier { fan_in, fan_out }),
            ParamSpec::new(self.bias(), &[self.c_out], Init::Zeros),
        ]
    }
}

/// Per-channel 1D convolution with same padding (odd kernel).
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    pub name: String,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        Self {
            name: name.into(),
            channels,
            kernel,
        }
    }

    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }
}

impl Layer for DepthwiseConv1d {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = Array2<f64>;

    fn forward(&self, params: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.ncols() != self.channels {
            return Err(Error::invalid(format!("{}: channel mismatch", self.name)));
        }
        let w = params.view2(&self.weight())?;
        let b = params.view1(&self.bias())?;
        let pad = (self.kernel / 2) as isize;
        let len = x.nrows() as isize;
        let mut y = Array2::zeros(x.raw_dim());
        y += &b;
        for t in 0..len {
            for j in 0..self.kernel {
                let src = t + j as isize - pad;
                if src < 0 || src >= len {
                    continue;
                }
                let mut out = y.row_mut(t as usize);
                out += &(&x.row(src as usize) * &w.row(j));
            }
        }
        Ok((y, x.clone()))
    }

    fn backward(&self, params: &ParameterSet, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut ParameterSet) -> Result<Array2<f64>> {
        let w = params.view2(&self.weight())?;
        let pad = (self.kernel / 2) as isize;
        let len = x.nrows() as isize;
        let mut dx = Array2::zeros(x.raw_dim());
        let mut dw = Array2::<f64>::zeros(w.raw_dim());
        for t in 0..len {
            for j in 0..self.kernel {
                let src = t + j as isize - pad;
                if src < 0 || src >= len {
                    continue;
                }
                let g = dy.row(t as usize);
                let mut dwr = dw.row_mut(j);
                dwr += &(&g * &x.row(src as usize));
                let mut dxr = dx.row_mut(src as usize);
                dxr += &(&g * &w.row(j));
            }
        }
        grads.view2_mut(&self.weight())?.scaled_add(1.0, &dw);
        grads.view1_mut(&self.bias())?.scaled_add(1.0, &dy.sum_axis(Axis(0)));
        Ok(dx)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(self.weight(), &[self.kernel, self.channels], Init::Xavier { fan_in: self.kernel, fan_out: self.kernel }),
            ParamSpec::new(self.bias(), &[self.channels], Init::Zeros),
        ]
    }
}

// Same-padded per-channel 2D correlation: x (C,H,W), kernels (C,k,k).
fn depthwise2d(x: ArrayView3<f64>, dw: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let k = dw.dim().1;
    let p = (k / 2) as isize;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for u in 0..k {
            for v in 0..k {
                let wt = dw[[ch, u, v]];
                if wt == 0.0 {
                    continue;
                }
                for i in 0..h {
                    let si = i as isize + u as isize - p;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + v as isize - p;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        out[[ch, i, j]] += wt * x[[ch, si as usize, sj as usize]];
                    }
                }
            }
        }
    }
    out
}

fn pointwise(d: &Array3<f64>, pw: ArrayView2<f64>) -> Array3<f64> {
    let (c, h, w) = d.dim();
    let flat = d.view().into_shape_with_order((c, h * w)).expect("contiguous");
    pw.t()
        .dot(&flat)
        .into_shape_with_order((pw.ncols(), h, w))
        .expect("shape")
}

/// Per-channel `k x k` convolution (same padding) followed by 1x1 channel mixing.
/// `depthwise: C x k x k`, `pointwise: C x C_out`.
pub fn depthwise_separable_conv2d(x: &Array3<f64>, depthwise: &Array3<f64>, pointwise_weights: &Array2<f64>) -> Result<Array3<f64>> {
    let c = x.dim().0;
    let (dc, k1, k2) = depthwise.dim();
    if dc != c || pointwise_weights.nrows() != c {
        return Err(Error::invalid(format!(
            "separable conv: input has {c} channels, depthwise {dc}, pointwise {}",
            pointwise_weights.nrows()
        )));
    }
    if k1 != k2 || k1 % 2 == 0 {
        return Err(Error::invalid("separable conv kernels must be square and odd"));
    }
    Ok(pointwise(&depthwise2d(x.view(), depthwise.view()), pointwise_weights.view()))
}

#[derive(Debug, Clone)]
pub struct DepthwiseSeparableConv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl DepthwiseSeparableConv2d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "separable conv kernel must be odd");
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
        }
    }

    /// `C k^2 + C C_out`, against `C C_out k^2` for a dense convolution.
    pub fn weight_count(&self) -> usize {
        self.c_in * self.kernel * self.kernel + self.c_in * self.c_out
    }

    fn depthwise(&self) -> String {
        format!("{}.depthwise", self.name)
    }

    fn pointwise(&self) -> String {
        format!("{}.pointwise", self.name)
    }
}

pub struct SeparableCache {
    x: Array3<f64>,
    mid: Array3<f64>,
}

impl Layer for DepthwiseSeparableConv2d {
    type Input = Array3<f64>;
    type Output = Array3<f64>;
    type Cache = SeparableCache;

    fn forward(&self, params: &ParameterSet, x: &Array3<f64>) -> Result<(Array3<f64>, SeparableCache)> {
        if x.dim().0 != self.c_in {
            return Err(Error::invalid(format!(
                "{}: expected {} channels, got {}",
                self.name,
                self.c_in,
                x.dim().0
            )));
        }
        let mid = depthwise2d(x.view(), params.view3(&self.depthwise())?);
        let y = pointwise(&mid, params.view2(&self.pointwise())?);
        Ok((y, SeparableCache { x: x.clone(), mid }))
    }

    fn backward(&self, params: &ParameterSet, cache: &SeparableCache, dy: &Array3<f64>, grads: &mut ParameterSet) -> Result<Array3<f64>> {
        let (c, h, w) = cache.x.dim();
        let pw = params.view2(&self.pointwise())?;
        let dw_k = params.view3(&self.depthwise())?;
        let dy2 = dy.view().into_shape_with_order((self.c_out, h * w)).expect("contiguous");
        let mid2 = cache.mid.view().into_shape_with_order((c, h * w)).expect("contiguous");
        grads.view2_mut(&self.pointwise())?.scaled_add(1.0, &mid2.dot(&dy2.t()));
        let dmid = pw.dot(&dy2).into_shape_with_order((c, h, w)).expect("shape");

        let k = self.kernel;
        let p = (k / 2) as isize;
        let mut dx = Array3::zeros((c, h, w));
        let mut dk = Array3::<f64>::zeros((c, k, k));
        for ch in 0..c {
            for u in 0..k {
                for v in 0..k {
                    let wt = dw_k[[ch, u, v]];
                    let mut acc = 0.0;
                    for i in 0..h {
                        let si = i as isize + u as isize - p;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + v as isize - p;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let g = dmid[[ch, i, j]];
                            acc += g * cache.x[[ch, si as usize, sj as usize]];
                            dx[[ch, si as usize, sj as usize]] += wt * g;
                        }
                    }
                    dk[[ch, u, v]] = acc;
                }
            }
        }
        grads.view3_mut(&self.depthwise())?.scaled_add(1.0, &dk);
        Ok(dx)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let kk = self.kernel * self.kernel;
        vec![
            ParamSpec::new(self.depthwise(), &[self.c_in, self.kernel, self.kernel], Init::Xavier { fan_in: kk, fan_out: kk }),
            ParamSpec::new(self.pointwise(), &[self.c_in, self.c_out], Init::Xavier { fan_in: self.c_in, fan_out: self.c_out }),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv1d_examples() {
        let x = array![[1.0], [2.0], [3.0]];
        let ident = Array3::from_shape_vec((3, 1, 1), vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(conv1d(&x, &ident, None, 1, 1).unwrap(), x);
        let ones = Array3::from_elem((2, 1, 1), 1.0);
        assert_eq!(conv1d(&x, &ones, None, 1, 0).unwrap(), array![[3.0], [5.0]]);
        let long = Array2::from_elem((10, 1), 1.0);
        let k3 = Array3::from_elem((3, 1, 1), 1.0);
        assert_eq!(conv1d(&long, &k3, None, 2, 1).unwrap().nrows(), 5);
        assert!(conv1d(&x, &Array3::zeros((6, 1, 1)), None, 1, 1).is_err());
    }

    #[test]
    fn separable_identity_and_counts() {
        let x = Array3::from_shape_fn((2, 4, 5), |(c, i, j)| (c * 20 + i * 5 + j) as f64);
        let mut dw = Array3::zeros((2, 3, 3));
        dw[[0, 1, 1]] = 1.0;
        dw[[1, 1, 1]] = 1.0;
        let pw = Array2::eye(2);
        assert_eq!(depthwise_separable_conv2d(&x, &dw, &pw).unwrap(), x);
        let layer = DepthwiseSeparableConv2d::new("s", 8, 16, 5);
        assert_eq!(layer.weight_count(), 8 * 25 + 8 * 16);
        let specs = layer.param_specs();
        assert_eq!(specs.iter().map(ParamSpec::numel).sum::<usize>(), layer.weight_count());
        assert!(depthwise_separable_conv2d(&x, &Array3::zeros((3, 3, 3)), &pw).is_err());
    }

    #[test]
    fn separable_matches_two_stage_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, co, h, w, k) = (3, 4, 6, 5, 3);
        let x = Array3::from_shape_simple_fn((c, h, w), || rng.gen_range(-1.0..1.0));
        let dw = Array3::from_shape_simple_fn((c, k, k), || rng.gen_range(-1.0..1.0));
        let pw = Array2::from_shape_simple_fn((c, co), || rng.gen_range(-1.0..1.0));
        let y = depthwise_separable_conv2d(&x, &dw, &pw).unwrap();
        // stage 1: explicit zero-padded correlation per channel
        let mut mid = Array3::<f64>::zeros((c, h, w));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            let (si, sj) = (i as i64 + u as i64 - 1, j as i64 + v as i64 - 1);
                            if (0..h as i64).contains(&si) && (0..w as i64).contains(&sj) {
                                acc += dw[[ch, u, v]] * x[[ch, si as usize, sj as usize]];
                            }
                        }
                    }
                    mid[[ch, i, j]] = acc;
                }
            }
        }
        // stage 2: 1x1 mixing
        for o in 0..co {
            for i in 0..h {
                for j in 0..w {
                    let expect: f64 = (0..c).map(|ch| pw[[ch, o]] * mid[[ch, i, j]]).sum();
                    assert!((y[[o, i, j]] - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn depthwise_conv1d_identity() {
        let layer = DepthwiseConv1d::new("d", 2, 5);
        let mut p = ParameterSet::init(&layer.param_specs(), 1).unwrap();
        let mut w = p.view2_mut("d.weight").unwrap();
        w.fill(0.0);
        w[[2, 0]] = 1.0;
        w[[2, 1]] = 1.0;
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(layer.infer(&p, &x).unwrap(), x);
    }
}
