//! Parameterized building blocks shared by every model variant.

use ndarray::Array2;
use qvsum_autograd::{Graph, ParamStore, Var};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng::Rng;

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub fn init_normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// `x W + b` on row vectors, `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.insert(weight.clone(), init_uniform(rng, in_dim, out_dim, in_dim))?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(b.clone(), init_uniform(rng, 1, out_dim, in_dim))?;
            Some(b)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let y = g.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

/// Two linear maps with a GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), in_dim, hidden, true)?,
            output: Linear::new(store, rng, &format!("{name}.output"), hidden, out_dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.gelu(h);
        self.output.forward(g, h)
    }
}

/// Element-wise sigmoid gate: `sigmoid(x W + b) ⊙ x`.
#[derive(Clone, Debug, PartialEq)]
pub struct HadamardGate {
    pub gate: Linear,
}

impl HadamardGate {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { gate: Linear::new(store, rng, name, dim, dim, true)? })
    }

    pub fn dim(&self) -> usize {
        self.gate.out_dim
    }

    pub fn weights(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let logits = self.gate.forward(g, x);
        g.sigmoid(logits)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let a = self.weights(g, x);
        g.mul(a, x)
    }
}

/// Learned gain and bias applied after per-row standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        store.insert(gain.clone(), Array2::ones((1, dim)))?;
        store.insert(bias.clone(), Array2::zeros((1, dim)))?;
        Ok(Self { gain, bias, eps })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm(x, self.eps);
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        let y = g.mul(n, gain);
        g.add(y, bias)
    }
}

/// Row-major `f32` slice to an `f64` matrix.
pub fn to_f64_matrix(rows: usize, cols: usize, data: &[f32]) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| data[i * cols + j] as f64)
}
