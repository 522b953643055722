//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Flat, Layer, ParameterSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Fraction of each tensor's entries to probe (at least one per tensor).
    pub sample_fraction: f64,
    pub seed: u64,
    pub check_input: bool,
    /// Denominator floor for the relative error, so gradients that are zero
    /// analytically are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            sample_fraction: 1.0,
            seed: 0,
            check_input: true,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst entry, e.g. `enc.q.weight[12]` or `input[3]`.
    pub worst: String,
    pub checked: usize,
}

/// Loss `sum_i c_i y_i` with fixed pseudo-random coefficients derived from `seed`.
pub fn probe_loss<T: Flat>(seed: u64) -> impl Fn(&T) -> (f64, T) {
    move |y: &T| {
        let flat = y.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs: Vec<f64> = (0..flat.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = flat.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        (loss, y.with_values(&coeffs))
    }
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the layer's analytic gradients with central differences of `loss`.
/// `loss` returns the scalar loss and its gradient with respect to the output.
pub fn grad_check<L, F>(
    layer: &L,
    params: &ParameterSet,
    input: &L::Input,
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Layer,
    L::Input: Flat,
    F: Fn(&L::Output) -> (f64, L::Output),
{
    let (out, cache) = layer.forward(params, input)?;
    let (_, d_out) = loss(&out);
    let mut grads = params.zeros_like();
    let d_in = layer.backward(params, &cache, &d_out, &mut grads)?;
    if let Some(name) = grads.all_finite() {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }

    let eval = |p: &ParameterSet, x: &L::Input| -> Result<f64> {
        let y = layer.infer(p, x)?;
        Ok(loss(&y).0)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let record = |location: String, analytic: f64, numeric: f64, report: &mut GradCheckReport| {
        let err = relative_error(analytic, numeric, opts.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = location;
        }
    };

    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name)?.len();
        let k = ((n as f64 * opts.sample_fraction).ceil() as usize).clamp(1, n.max(1));
        if n == 0 {
            continue;
        }
        let picks = if k >= n { (0..n).collect::<Vec<_>>() } else { sample(&mut rng, n, k).into_vec() };
        for idx in picks {
            let original = params.get(name)?.as_slice_memory_order().expect("contiguous")[idx];
            let set = |p: &mut ParameterSet, v: f64| -> Result<()> {
                p.get_mut(name)?.as_slice_memory_order_mut().expect("contiguous")[idx] = v;
                Ok(())
            };
            set(&mut probe, original + opts.step)?;
            let plus = eval(&probe, input)?;
            set(&mut probe, original - opts.step)?;
            let minus = eval(&probe, input)?;
            set(&mut probe, original)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.get(name)?.as_slice_memory_order().expect("contiguous")[idx];
            record(format!("{name}[{idx}]"), analytic, numeric, &mut report);
        }
    }

    if opts.check_input {
        let base = input.to_flat();
        let analytic = d_in.to_flat();
        let n = base.len();
        let k = ((n as f64 * opts.sample_fraction).ceil() as usize).clamp(1, n.max(1));
        let picks = if k >= n { (0..n).collect::<Vec<_>>() } else { sample(&mut rng, n, k).into_vec() };
        let mut shifted = base.clone();
        for idx in picks {
            shifted[idx] = base[idx] + opts.step;
            let plus = eval(params, &input.with_values(&shifted))?;
            shifted[idx] = base[idx] - opts.step;
            let minus = eval(params, &input.with_values(&shifted))?;
            shifted[idx] = base[idx];
            let numeric = (plus - minus) / (2.0 * opts.step);
            record(format!("input[{idx}]"), analytic[idx], numeric, &mut report);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::*;
    use ndarray::{Array1, Array2, Array3};

    fn rand2(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    fn randomized(specs: &[ParamSpec], seed: u64) -> ParameterSet {
        // Biases and gains are perturbed too so their gradients are exercised off the identity.
        let mut p = ParameterSet::init(specs, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for (_, t) in p.iter_mut() {
            t.mapv_inplace(|v| v + rng.gen_range(-0.1..0.1));
        }
        p
    }

    fn check<L>(layer: &L, input: &L::Input, seed: u64) -> GradCheckReport
    where
        L: Layer,
        L::Input: Flat,
        L::Output: Flat,
    {
        let p = randomized(&layer.param_specs(), seed);
        grad_check(layer, &p, input, probe_loss(seed + 1), &GradCheckOptions::default()).unwrap()
    }

    #[test]
    fn linear() {
        let r = check(&Linear::new("l", 4, 3), &rand2(5, 4, 1), 2);
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn activations_and_norm() {
        let r = check(&Gelu, &rand2(3, 7, 3), 0);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        let r = check(&SoftmaxRows, &rand2(3, 5, 4), 0);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        let r = check(&LayerNorm::new("ln", 6), &rand2(4, 6, 5), 6);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn convolutions() {
        let r = check(&Conv1d::new("c", 3, 4, 3, 2, 1), &rand2(9, 3, 7), 8);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        let r = check(&DepthwiseConv1d::new("d", 4, 5), &rand2(7, 4, 9), 10);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array3::from_shape_simple_fn((2, 5, 4), || rng.gen_range(-1.0..1.0));
        let r = check(&DepthwiseSeparableConv2d::new("s", 2, 3, 3), &x, 12);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn attention() {
        let cfg = AttentionConfig::new(6, 2).unwrap();
        let r = check(&MultiHeadSelfAttention::new("a", cfg), &rand2(4, 6, 13), 14);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn recurrent() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Array1::from_shape_simple_fn(3, || rng.gen_range(-1.0..1.0));
        let h = Array1::from_shape_simple_fn(4, || rng.gen_range(-0.9..0.9));
        let r = check(&GruCell::new("g", 3, 4), &(x, h), 16);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        let r = check(&BiGru::new("b", 3, 4), &rand2(5, 3, 17), 18);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Broken(Linear);
        impl Layer for Broken {
            type Input = Array2<f64>;
            type Output = Array2<f64>;
            type Cache = Array2<f64>;
            fn forward(&self, p: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
                self.0.forward(p, x)
            }
            fn backward(&self, p: &ParameterSet, c: &Array2<f64>, dy: &Array2<f64>, g: &mut ParameterSet) -> Result<Array2<f64>> {
                let dx = self.0.backward(p, c, dy, g)?;
                g.view1_mut("l.bias")?.mapv_inplace(|v| v * 2.0);
                Ok(dx)
            }
            fn param_specs(&self) -> Vec<ParamSpec> {
                self.0.param_specs()
            }
        }
        let r = check(&Broken(Linear::new("l", 2, 2)), &rand2(3, 2, 1), 1);
        assert!(r.max_rel_error > 0.1);
        assert!(r.worst.starts_with("l.bias"));
    }
}
