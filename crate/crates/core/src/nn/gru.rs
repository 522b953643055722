//! Gated recurrent units. Gate order in the packed weights is (reset, update, candidate):
//!
//! ```text
//! r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
//! z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
//! n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
//! h' = (1 - z) * n + z * h
//! ```

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};

use super::{Init, Layer, ParamSpec, ParameterSet};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
struct GruWeights {
    name: String,
    input: usize,
    hidden: usize,
}

pub struct SequenceCache {
    x: Array2<f64>,
    /// Row `t` is the state before step `t`; the last row is the final state.
    states: Array2<f64>,
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    c_n: Array2<f64>,
}

impl GruWeights {
    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    fn specs(&self) -> Vec<ParamSpec> {
        let (i, h) = (self.input, self.hidden);
        vec![
            ParamSpec::new(self.key("w_ih"), &[i, 3 * h], Init::Xavier { fan_in: i, fan_out: 3 * h }),
            ParamSpec::new(self.key("w_hh"), &[h, 3 * h], Init::Xavier { fan_in: h, fan_out: 3 * h }),
            ParamSpec::new(self.key("b_ih"), &[3 * h], Init::Zeros),
            ParamSpec::new(self.key("b_hh"), &[3 * h], Init::Zeros),
        ]
    }

    fn run(&self, params: &ParameterSet, x: &Array2<f64>, h0: ArrayView1<f64>) -> Result<SequenceCache> {
        if x.ncols() != self.input {
            return Err(Error::invalid(format!(
                "{}: expected {} input features, got {}",
                self.name,
                self.input,
                x.ncols()
            )));
        }
        if h0.len() != self.hidden {
            return Err(Error::invalid(format!("{}: hidden state has wrong size", self.name)));
        }
        let hd = self.hidden;
        let w_hh = params.view2(&self.key("w_hh"))?;
        let b_hh = params.view1(&self.key("b_hh"))?;
        let a = x.dot(&params.view2(&self.key("w_ih"))?) + params.view1(&self.key("b_ih"))?;
        let steps = x.nrows();
        let mut states = Array2::zeros((steps + 1, hd));
        states.row_mut(0).assign(&h0);
        let mut r = Array2::zeros((steps, hd));
        let mut z = Array2::zeros((steps, hd));
        let mut n = Array2::zeros((steps, hd));
        let mut c_n = Array2::zeros((steps, hd));
        for t in 0..steps {
            let h = states.row(t).to_owned();
            let c = h.dot(&w_hh) + b_hh;
            let at = a.row(t);
            for j in 0..hd {
                let rj = sigmoid(at[j] + c[j]);
                let zj = sigmoid(at[hd + j] + c[hd + j]);
                let nj = (at[2 * hd + j] + rj * c[2 * hd + j]).tanh();
                r[[t, j]] = rj;
                z[[t, j]] = zj;
                n[[t, j]] = nj;
                c_n[[t, j]] = c[2 * hd + j];
                states[[t + 1, j]] = (1.0 - zj) * nj + zj * h[j];
            }
        }
        Ok(SequenceCache {
            x: x.clone(),
            states,
            r,
            z,
            n,
            c_n,
        })
    }

    /// Returns `(dx, dh0)`.
    fn backprop(
        &self,
        params: &ParameterSet,
        c: &SequenceCache,
        d_states: &Array2<f64>,
        grads: &mut ParameterSet,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let hd = self.hidden;
        let steps = c.x.nrows();
        let w_hh = params.view2(&self.key("w_hh"))?;
        let w_ih = params.view2(&self.key("w_ih"))?;
        let mut da = Array2::zeros((steps, 3 * hd));
        let mut dc = Array2::zeros((steps, 3 * hd));
        let mut carry = Array1::<f64>::zeros(hd);
        for t in (0..steps).rev() {
            let dh = &d_states.row(t) + &carry;
            let mut direct = Array1::zeros(hd);
            for j in 0..hd {
                let (r, z, n, cn) = (c.r[[t, j]], c.z[[t, j]], c.n[[t, j]], c.c_n[[t, j]]);
                let h_prev = c.states[[t, j]];
                let dn = dh[j] * (1.0 - z);
                let dz = dh[j] * (h_prev - n);
                direct[j] = dh[j] * z;
                let dpn = dn * (1.0 - n * n);
                let dpz = dz * z * (1.0 - z);
                let dpr = dpn * cn * r * (1.0 - r);
                da[[t, j]] = dpr;
                da[[t, hd + j]] = dpz;
                da[[t, 2 * hd + j]] = dpn;
                dc[[t, j]] = dpr;
                dc[[t, hd + j]] = dpz;
                dc[[t, 2 * hd + j]] = dpn * r;
            }
            carry = direct + dc.row(t).dot(&w_hh.t());
        }
        let prev = c.states.slice(s![..steps, ..]);
        grads.view2_mut(&self.key("w_ih"))?.scaled_add(1.0, &c.x.t().dot(&da));
        grads.view2_mut(&self.key("w_hh"))?.scaled_add(1.0, &prev.t().dot(&dc));
        grads.view1_mut(&self.key("b_ih"))?.scaled_add(1.0, &da.sum_axis(Axis(0)));
        grads.view1_mut(&self.key("b_hh"))?.scaled_add(1.0, &dc.sum_axis(Axis(0)));
        Ok((da.dot(&w_ih.t()), carry))
    }
}

/// Single GRU step: `(x_t, h_prev) -> h_t`.
#[derive(Debug, Clone)]
pub struct GruCell {
    weights: GruWeights,
}

impl GruCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            weights: GruWeights {
                name: name.into(),
                input,
                hidden,
            },
        }
    }
}

impl Layer for GruCell {
    type Input = (Array1<f64>, Array1<f64>);
    type Output = Array1<f64>;
    type Cache = SequenceCache;

    fn forward(&self, params: &ParameterSet, (x, h): &Self::Input) -> Result<(Array1<f64>, SequenceCache)> {
        let x2 = x.view().insert_axis(Axis(0)).to_owned();
        let cache = self.weights.run(params, &x2, h.view())?;
        Ok((cache.states.row(1).to_owned(), cache))
    }

    fn backward(&self, params: &ParameterSet, cache: &SequenceCache, dy: &Array1<f64>, grads: &mut ParameterSet) -> Result<Self::Input> {
        let d = dy.view().insert_axis(Axis(0)).to_owned();
        let (dx, dh) = self.weights.backprop(params, cache, &d, grads)?;
        Ok((dx.row(0).to_owned(), dh))
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        self.weights.specs()
    }
}

/// Unidirectional GRU over a `T x input` sequence from a zero initial state.
/// Output row `t` is the state after step `t`.
#[derive(Debug, Clone)]
pub struct Gru {
    weights: GruWeights,
}

impl Gru {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            weights: GruWeights {
                name: name.into(),
                input,
                hidden,
            },
        }
    }
}

impl Layer for Gru {
    type Input = Array2<f64>;
    type Output = Array2<f64>;
    type Cache = SequenceCache;

    fn forward(&self, params: &ParameterSet, x: &Array2<f64>) -> Result<(Array2<f64>, SequenceCache)> {
        let cache = self.weights.run(params, x, Array1::zeros(self.weights.hidden).view())?;
        Ok((cache.states.slice(s![1.., ..]).to_owned(), cache))
    }

    fn backward(&self, params: &ParameterSet, cache: &SequenceCache, dy: &Array2<f64>, grads: &mut ParameterSet) -> Result<Array2<f64>> {
        Ok(self.weights.backprop(params, cache, dy, grads)?.0)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        self.weights.specs()
    }
}

/// Bidirectional GRU. Output is `T x 2H` (forward states, then backward states
/// aligned to input positions); the final state is `[h_fwd(T), h_bwd(1)]`.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub hidden: usize,
    forward: Gru,
    backward: Gru,
}

pub struct BiGruCache {
    fwd: SequenceCache,
    bwd: SequenceCache,
}

fn reverse_rows(x: &Array2<f64>) -> Array2<f64> {
    x.slice(s![..;-1, ..]).to_owned()
}

impl BiGru {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        let name = name.into();
        Self {
            hidden,
            forward: Gru::new(format!("{name}.fwd"), input, hidden),
            backward: Gru::new(format!("{name}.bwd"), input, hidden),
        }
    }
}

impl Layer for BiGru {
    type Input = Array2<f64>;
    type Output = (Array2<f64>, Array1<f64>);
    type Cache = BiGruCache;

    fn forward(&self, params: &ParameterSet, x: &Array2<f64>) -> Result<(Self::Output, BiGruCache)> {
        if x.nrows() == 0 {
            return Err(Error::invalid("BiGRU over an empty sequence"));
        }
        let (hf, fwd) = self.forward.forward(params, x)?;
        let (hb_rev, bwd) = self.backward.forward(params, &reverse_rows(x))?;
        let hb = reverse_rows(&hb_rev);
        let out = concatenate![Axis(1), hf, hb];
        let last = x.nrows() - 1;
        let final_state = concatenate![Axis(0), hf.row(last), hb.row(0)];
        Ok(((out, final_state), BiGruCache { fwd, bwd }))
    }

    fn backward(&self, params: &ParameterSet, cache: &BiGruCache, (d_out, d_final): &Self::Output, grads: &mut ParameterSet) -> Result<Array2<f64>> {
        let h = self.hidden;
        let steps = d_out.nrows();
        let mut dhf = d_out.slice(s![.., ..h]).to_owned();
        let mut dhb = d_out.slice(s![.., h..]).to_owned();
        {
            let mut last = dhf.row_mut(steps - 1);
            last += &d_final.slice(s![..h]);
        }
        {
            let mut first = dhb.row_mut(0);
            first += &d_final.slice(s![h..]);
        }
        let dx_f = self.forward.backward(params, &cache.fwd, &dhf, grads)?;
        let dx_b_rev = self.backward.backward(params, &cache.bwd, &reverse_rows(&dhb), grads)?;
        Ok(dx_f + reverse_rows(&dx_b_rev))
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.forward.param_specs();
        specs.extend(self.backward.param_specs());
        specs
    }
}
