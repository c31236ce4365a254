//! Parameterised layers shared by the models.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[inputs, outputs], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, outputs])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[1, width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// LSTM cell with fused gate weights, gate order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = Tensor::zeros(&[1, 4 * hidden]);
        // forget gate starts open
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            input_weight: store.add(
                format!("{name}.input_weight"),
                Tensor::randn(&[inputs, 4 * hidden], (1.0 / inputs as f64).sqrt(), rng),
            ),
            hidden_weight: store.add(
                format!("{name}.hidden_weight"),
                Tensor::randn(&[hidden, 4 * hidden], (1.0 / hidden as f64).sqrt(), rng),
            ),
            bias: store.add(format!("{name}.bias"), bias),
            hidden,
        }
    }

    /// Input contributions `x·W_x + b` for every time step at once (`T×4H`).
    pub fn project_inputs(&self, g: &mut Graph, store: &ParamStore, xs: Var) -> Result<Var> {
        let w = g.param(store, self.input_weight);
        let b = g.param(store, self.bias);
        let p = g.matmul(xs, w)?;
        g.add_row(p, b)
    }

    /// One step from a precomputed `1×4H` input projection.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, projected: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wh = g.param(store, self.hidden_weight);
        let rec = g.matmul(h, wh)?;
        let gates = g.add(projected, rec)?;
        let n = self.hidden;
        let i = g.slice_cols(gates, 0, n)?;
        let f = g.slice_cols(gates, n, n)?;
        let cand = g.slice_cols(gates, 2 * n, n)?;
        let o = g.slice_cols(gates, 3 * n, n)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    /// Run over the rows of `xs` (`T×in`), forwards or backwards in time, from
    /// hidden state `h0` (zero when absent) and a zero cell. Returns the hidden
    /// state after every step in input order and the final hidden state.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xs: Var,
        h0: Option<Var>,
        reverse: bool,
    ) -> Result<(Vec<Var>, Var)> {
        let steps = g.value(xs).rows();
        let proj = self.project_inputs(g, store, xs)?;
        let mut h = match h0 {
            Some(h) => h,
            None => g.constant(Tensor::zeros(&[1, self.hidden])),
        };
        let mut c = g.constant(Tensor::zeros(&[1, self.hidden]));
        let mut outputs = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let p = g.slice_rows(proj, t, 1)?;
            let (nh, nc) = self.step(g, store, p, h, c)?;
            h = nh;
            c = nc;
            outputs[t] = h;
        }
        Ok((outputs, h))
    }
}

/// Sinusoidal position table, used to initialise learned positions.
pub fn sinusoidal_table(rows: usize, width: usize, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(&[rows, width]);
    for pos in 0..rows {
        for i in 0..width / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / width as f64);
            let angle = pos as f64 * freq;
            t.data_mut()[pos * width + 2 * i] = scale * angle.sin();
            t.data_mut()[pos * width + 2 * i + 1] = scale * angle.cos();
        }
    }
    t
}
