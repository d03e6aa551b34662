use ndarray::Array2;

use super::batchnorm::BatchNormCache;
use super::conv::ConvCache;
use super::dense::DenseCache;
use super::{Activation, BatchNormLayer, Conv2DLayer, DenseLayer, Gradients, Matrix};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv2d(Conv2DLayer),
    BatchNorm(BatchNormLayer),
    Activation(Activation),
    /// Copy every input row `channels` times along the feature axis.
    Replicate { channels: usize },
}

enum Cache {
    Dense(DenseCache),
    Conv(ConvCache),
    BatchNorm(BatchNormCache),
    Activation(Matrix),
    Replicate { in_features: usize },
}

/// Intermediates recorded by a training-mode forward pass.
pub struct Tape {
    caches: Vec<Cache>,
}

impl Layer {
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Dense(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x),
            Layer::Activation(a) => Ok(a.map(x)),
            Layer::Replicate { channels } => Ok(replicate(x, *channels)),
        }
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, Cache)> {
        Ok(match self {
            Layer::Dense(l) => {
                let (y, c) = l.forward_cached(x)?;
                (y, Cache::Dense(c))
            }
            Layer::Conv2d(l) => {
                let (y, c) = l.forward_cached(x)?;
                (y, Cache::Conv(c))
            }
            Layer::BatchNorm(l) => {
                let (y, c) = l.forward_cached(x)?;
                (y, Cache::BatchNorm(c))
            }
            Layer::Activation(a) => (a.map(x), Cache::Activation(x.clone())),
            Layer::Replicate { channels } => (
                replicate(x, *channels),
                Cache::Replicate {
                    in_features: x.ncols(),
                },
            ),
        })
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(l) => l.param_count(),
            Layer::Conv2d(l) => l.param_count(),
            Layer::BatchNorm(l) => l.param_count(),
            Layer::Activation(_) | Layer::Replicate { .. } => 0,
        }
    }
}

fn replicate(x: &Matrix, channels: usize) -> Matrix {
    let f = x.ncols();
    let mut out = Array2::zeros((x.nrows(), channels * f));
    for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        for c in 0..channels {
            for (d, s) in dst.iter_mut().skip(c * f).take(f).zip(src.iter()) {
                *d = *s;
            }
        }
    }
    out
}

/// An ordered stack of layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Training-mode forward pass recording what [`Sequential::backward`] needs.
    pub fn forward_train(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward_cached(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, Tape { caches }))
    }

    /// Fold the batch statistics of a training pass into the running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            if let (Layer::BatchNorm(bn), Cache::BatchNorm(c)) = (layer, cache) {
                bn.update_running(c);
            }
        }
    }

    /// Overwrite the running estimates with the batch statistics of a training pass.
    pub fn set_running_stats(&mut self, tape: &Tape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            if let (Layer::BatchNorm(bn), Cache::BatchNorm(c)) = (layer, cache) {
                bn.set_running(c);
            }
        }
    }

    /// Reverse pass: the gradient w.r.t. the input and every parameter tensor.
    pub fn backward(&self, tape: &Tape, grad_out: Matrix) -> Result<(Matrix, Gradients)> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::Shape(
                "tape was not recorded by this network".into(),
            ));
        }
        let mut grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out;
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            let (gin, pg) = match (layer, cache) {
                (Layer::Dense(l), Cache::Dense(c)) => {
                    let (gi, p) = l.backward(c, &g);
                    (gi, Vec::from(p))
                }
                (Layer::Conv2d(l), Cache::Conv(c)) => {
                    let (gi, p) = l.backward(c, &g);
                    (gi, Vec::from(p))
                }
                (Layer::BatchNorm(l), Cache::BatchNorm(c)) => {
                    let (gi, p) = l.backward(c, &g);
                    (gi, Vec::from(p))
                }
                (Layer::Activation(a), Cache::Activation(pre)) => (a.backprop(pre, &g), vec![]),
                (Layer::Replicate { channels }, Cache::Replicate { in_features }) => {
                    let mut gi = Array2::zeros((g.nrows(), *in_features));
                    for (src, mut dst) in g.rows().into_iter().zip(gi.rows_mut()) {
                        for c in 0..*channels {
                            for (d, s) in dst.iter_mut().zip(src.iter().skip(c * in_features)) {
                                *d += *s;
                            }
                        }
                    }
                    (gi, vec![])
                }
                _ => {
                    return Err(Error::Shape(
                        "tape was not recorded by this network".into(),
                    ))
                }
            };
            grads.push(pg);
            g = gin;
        }
        grads.reverse();
        Ok((g, grads.into_iter().flatten().collect()))
    }

    /// Trainable parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => {
                    out.push(l.weights.as_slice().expect("standard layout"));
                    out.push(l.biases.as_slice().expect("standard layout"));
                }
                Layer::Conv2d(l) => {
                    out.push(l.kernels.as_slice().expect("standard layout"));
                    out.push(l.biases.as_slice().expect("standard layout"));
                }
                Layer::BatchNorm(l) => {
                    out.push(l.gamma.as_slice().expect("standard layout"));
                    out.push(l.beta.as_slice().expect("standard layout"));
                }
                Layer::Activation(_) | Layer::Replicate { .. } => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(l) => {
                    out.push(l.weights.as_slice_mut().expect("standard layout"));
                    out.push(l.biases.as_slice_mut().expect("standard layout"));
                }
                Layer::Conv2d(l) => {
                    out.push(l.kernels.as_slice_mut().expect("standard layout"));
                    out.push(l.biases.as_slice_mut().expect("standard layout"));
                }
                Layer::BatchNorm(l) => {
                    out.push(l.gamma.as_slice_mut().expect("standard layout"));
                    out.push(l.beta.as_slice_mut().expect("standard layout"));
                }
                Layer::Activation(_) | Layer::Replicate { .. } => {}
            }
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some([
                    bn.running_mean.as_slice().expect("standard layout"),
                    bn.running_var.as_slice().expect("standard layout"),
                ]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Layer::BatchNorm(bn) = l {
                out.push(bn.running_mean.as_slice_mut().expect("standard layout"));
                out.push(bn.running_var.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }
}
