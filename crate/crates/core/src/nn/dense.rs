use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use super::{into_flat, Init, Matrix};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
    Identity,
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `ln(1 + e^x)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
            Activation::Softplus => softplus(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`; ReLU uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }

    pub(crate) fn map(self, pre: &Matrix) -> Matrix {
        match self {
            Activation::Identity => pre.clone(),
            _ => pre.mapv(|v| self.apply(v)),
        }
    }

    /// `grad_out ⊙ φ'(pre)`.
    pub(crate) fn backprop(self, pre: &Matrix, grad_out: &Matrix) -> Matrix {
        match self {
            Activation::Identity => grad_out.clone(),
            _ => {
                let mut g = grad_out.clone();
                Zip::from(&mut g).and(pre).for_each(|g, &p| *g *= self.derivative(p));
                g
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidParameter(format!("unknown activation '{other}'"))),
        }
    }
}

/// Fully connected layer `φ(W c + b)`, weights stored `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

pub(crate) struct DenseCache {
    input: Matrix,
    pre: Matrix,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            biases: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn new<R: Rng>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let bound = init.bound(in_dim, out_dim);
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..=bound));
        Self {
            weights,
            biases: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "dense layer expects width {}, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn pre_activation(&self, x: &Matrix) -> Matrix {
        let mut pre = x.dot(&self.weights.t());
        pre += &self.biases;
        pre
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        Ok(self.activation.map(&self.pre_activation(x)))
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, DenseCache)> {
        self.check(x)?;
        let pre = self.pre_activation(x);
        let out = self.activation.map(&pre);
        Ok((
            out,
            DenseCache {
                input: x.clone(),
                pre,
            },
        ))
    }

    /// Returns the input gradient and `[dW, db]`.
    pub(crate) fn backward(&self, cache: &DenseCache, grad_out: &Matrix) -> (Matrix, [Vec<f64>; 2]) {
        let delta = self.activation.backprop(&cache.pre, grad_out);
        let grad_w = delta.t().dot(&cache.input);
        let grad_b = delta.sum_axis(Axis(0));
        let grad_in = delta.dot(&self.weights);
        (grad_in, [into_flat(grad_w), grad_b.to_vec()])
    }
}
