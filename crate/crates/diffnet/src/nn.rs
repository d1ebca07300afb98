//! Layers built on the tape: affine maps, MLPs, a GRU cell and a
//! clamped diagonal-Gaussian head.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiffnetError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Bound, Tape, Var};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 2.0;

/// Uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn fan_in_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// `y = x W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(in_dim, out_dim, in_dim, rng),
        );
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(1, out_dim, in_dim, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let xw = tape.matmul(x, p.var(self.weight));
        tape.add(xw, p.var(self.bias))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Concatenate the network input to the input of every layer after the first.
    pub skip: bool,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation: Activation::Relu,
            skip: false,
        }
    }

    pub fn with_skip(mut self, skip: bool) -> Self {
        self.skip = skip;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }
}

/// Fully connected network; the output layer is linear.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub config: MlpConfig,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, config: MlpConfig, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(config.hidden.len() + 1);
        let mut width = config.input_dim;
        let widths = config.hidden.iter().copied().chain([config.output_dim]);
        for (i, out) in widths.enumerate() {
            let in_dim = if config.skip && i > 0 {
                width + config.input_dim
            } else {
                width
            };
            layers.push(Linear::new(store, &format!("{name}.l{i}"), in_dim, out, rng));
            width = out;
        }
        Self { config, layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let got = tape.value(x).ncols();
        if got != self.config.input_dim {
            return Err(DiffnetError::ShapeMismatch {
                context: "mlp input",
                expected: self.config.input_dim,
                got,
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if self.config.skip && i > 0 {
                tape.concat(&[h, x])
            } else {
                h
            };
            h = layer.forward(tape, p, input);
            if i < last {
                h = self.config.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Batched evaluation without recording a tape.
    pub fn eval(&self, store: &ParamStore, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.config.input_dim {
            return Err(DiffnetError::ShapeMismatch {
                context: "mlp input",
                expected: self.config.input_dim,
                got: x.ncols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if self.config.skip && i > 0 {
                h = ndarray::concatenate![ndarray::Axis(1), h, *x];
            }
            let mut y = h.dot(store.get(layer.weight));
            y += store.get(layer.bias);
            if i < last {
                match self.config.activation {
                    Activation::Relu => y.mapv_inplace(|v| v.max(0.0)),
                    Activation::Tanh => y.mapv_inplace(f64::tanh),
                    Activation::Identity => {}
                }
            }
            h = y;
        }
        Ok(h)
    }
}

/// Evaluate an MLP on a single input vector.
pub fn mlp_forward(store: &ParamStore, mlp: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row");
    Ok(mlp.eval(store, &x)?.into_raw_vec_and_offset().0)
}

/// GRU cell with gate layout `[reset | update | candidate]`:
///
/// ```text
/// r  = σ(x W_r + b_r + h U_r + c_r)
/// z  = σ(x W_z + b_z + h U_z + c_z)
/// h̃ = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))
/// h' = (1 − z) ⊙ h̃ + z ⊙ h
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let h3 = 3 * hidden_dim;
        let w_input = store.add(
            format!("{name}.w_input"),
            fan_in_uniform(input_dim, h3, hidden_dim, rng),
        );
        let w_hidden = store.add(
            format!("{name}.w_hidden"),
            fan_in_uniform(hidden_dim, h3, hidden_dim, rng),
        );
        let b_input = store.add(format!("{name}.b_input"), fan_in_uniform(1, h3, hidden_dim, rng));
        let b_hidden = store.add(format!("{name}.b_hidden"), fan_in_uniform(1, h3, hidden_dim, rng));
        Self {
            w_input,
            w_hidden,
            b_input,
            b_hidden,
            input_dim,
            hidden_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let (xi, hi) = (tape.value(x).ncols(), tape.value(h).ncols());
        if xi != self.input_dim {
            return Err(DiffnetError::ShapeMismatch {
                context: "gru input",
                expected: self.input_dim,
                got: xi,
            });
        }
        if hi != self.hidden_dim {
            return Err(DiffnetError::ShapeMismatch {
                context: "gru hidden",
                expected: self.hidden_dim,
                got: hi,
            });
        }
        let n = self.hidden_dim;
        let gx = tape.matmul(x, p.var(self.w_input));
        let gx = tape.add(gx, p.var(self.b_input));
        let gh = tape.matmul(h, p.var(self.w_hidden));
        let gh = tape.add(gh, p.var(self.b_hidden));

        let xr = tape.columns(gx, 0, n);
        let hr = tape.columns(gh, 0, n);
        let r = tape.add(xr, hr);
        let r = tape.sigmoid(r);

        let xz = tape.columns(gx, n, 2 * n);
        let hz = tape.columns(gh, n, 2 * n);
        let z = tape.add(xz, hz);
        let z = tape.sigmoid(z);

        let xn = tape.columns(gx, 2 * n, 3 * n);
        let hn = tape.columns(gh, 2 * n, 3 * n);
        let rhn = tape.mul(r, hn);
        let cand = tape.add(xn, rhn);
        let cand = tape.tanh(cand);

        // h' = h̃ + z ⊙ (h − h̃)
        let diff = tape.sub(h, cand);
        let zd = tape.mul(z, diff);
        Ok(tape.add(cand, zd))
    }
}

/// One GRU step on single vectors.
pub fn gru_step(store: &ParamStore, cell: &GruCell, input: &[f64], hidden: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = tape.bind(store);
    let x = tape.row(input);
    let h = tape.row(hidden);
    let out = cell.forward(&mut tape, &p, x, h)?;
    Ok(tape.value(out).iter().copied().collect())
}

/// Splits a `n×2d` output into a mean and a clamped log-variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub dim: usize,
}

impl GaussianHead {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    /// Width of the raw network output feeding this head.
    pub fn raw_dim(&self) -> usize {
        2 * self.dim
    }

    pub fn split(&self, tape: &mut Tape, raw: Var) -> (Var, Var) {
        let mean = tape.columns(raw, 0, self.dim);
        let lv = tape.columns(raw, self.dim, 2 * self.dim);
        let lv = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        (mean, lv)
    }
}
